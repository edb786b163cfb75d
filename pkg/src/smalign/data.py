"""Synthetic multi-view embeddings, the SMAE file format and entity batch sampling."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .aligner import atomic_write_bytes
from .sets import EmbeddingBlock, EntityBatch, Modality, build_entity_batch
from .tensor import Rng, ShapeError, matmul, row_l2_normalize

SPLITS = ("train", "val", "test")
FILE_MAGIC = b"SMAE"
FILE_VERSION = 1
_HEADER_DTYPE = np.dtype([("magic", "S4"), ("version", "<u2"), ("reserved", "<u2"), ("dim", "<u4"), ("count", "<u8")])


@dataclass
class SynthConfig:
    num_entities: int = 500
    views_x: int = 4
    views_y: int = 5
    latent_dim: int = 16
    dim_x: int = 64
    dim_y: int = 96
    noise_sigma: float = 0.05
    nonlinearity: str = "tanh"
    seed: int = 0

    def validate(self) -> None:
        if self.num_entities < 3:
            raise ValueError("num_entities must be at least 3 (one per split)")
        if self.views_x < 1 or self.views_y < 1:
            raise ValueError("views_x and views_y must be at least 1")
        if self.latent_dim < 1 or self.dim_x < self.latent_dim or self.dim_y < self.latent_dim:
            raise ValueError("dim_x and dim_y must be >= latent_dim >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.nonlinearity not in ("none", "tanh"):
            raise ValueError(f"nonlinearity must be 'none' or 'tanh', got {self.nonlinearity!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown synth config key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class Dataset:
    """Raw (frozen-encoder space) blocks for both modalities and an entity split."""

    x: EmbeddingBlock
    y: EmbeddingBlock
    split: dict[str, list[int]]
    meta: dict = field(default_factory=dict)

    def blocks(self, split: str) -> tuple[EmbeddingBlock, EmbeddingBlock]:
        keep = set(self.split[split])
        rx = [i for i, e in enumerate(self.x.entity_ids.tolist()) if e in keep]
        ry = [i for i, e in enumerate(self.y.entity_ids.tolist()) if e in keep]
        return self.x.take(rx), self.y.take(ry)


def _split_entities(ids: list[int], rng: Rng) -> dict[str, list[int]]:
    n = len(ids)
    order = [ids[i] for i in rng.permutation(n)]
    n_val = max(1, round(0.1 * n))
    n_test = max(1, round(0.1 * n))
    n_train = n - n_val - n_test
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }


def generate(cfg: SynthConfig) -> Dataset:
    """Shared-latent synthetic embeddings.

    Entity ``e`` has latent ``z_e ~ N(0, I)``; each X view is
    ``act(M_x z_e + sigma * eps)`` and each Y view ``act(M_y z_e + sigma * eps)``
    with fixed seeded mixing matrices (entries ``N(0, 1/latent_dim)``).
    Rows are L2-normalised and ordered by entity, then view.
    """
    cfg.validate()
    root = Rng(cfg.seed)
    E, k = cfg.num_entities, cfg.latent_dim
    mx = root.child(0).normal((cfg.dim_x, k), 1 / np.sqrt(k))
    my = root.child(1).normal((cfg.dim_y, k), 1 / np.sqrt(k))
    z = root.child(2).normal((E, k))
    act = np.tanh if cfg.nonlinearity == "tanh" else (lambda a: a)

    def views(mix, n_views, noise_rng):
        clean = np.repeat(matmul(z, mix.T), n_views, axis=0)
        noise = noise_rng.normal(clean.shape, cfg.noise_sigma)
        return row_l2_normalize(act(clean + noise)).astype(np.float32)

    ids = np.arange(E, dtype=np.uint64)
    x = EmbeddingBlock(views(mx, cfg.views_x, root.child(3)), np.repeat(ids, cfg.views_x), Modality.X)
    y = EmbeddingBlock(views(my, cfg.views_y, root.child(4)), np.repeat(ids, cfg.views_y), Modality.Y)
    split = _split_entities(list(range(E)), root.child(5))
    return Dataset(x, y, split, {"latents": z, "mix_x": mx, "mix_y": my, "synth": asdict(cfg)})


# -- SMAE embedding files ------------------------------------------------------


@dataclass
class EmbeddingRecords:
    entity_ids: np.ndarray  # uint64
    modality: np.ndarray  # uint8, 0 = X, 1 = Y
    vectors: np.ndarray  # float32 (count, dim)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def block(self, modality: Modality) -> EmbeddingBlock:
        rows = np.flatnonzero(self.modality == int(modality))
        return EmbeddingBlock(self.vectors[rows], self.entity_ids[rows], modality)

    @classmethod
    def from_blocks(cls, *blocks: EmbeddingBlock) -> "EmbeddingRecords":
        dims = {b.dim for b in blocks}
        if len(dims) > 1:
            raise ShapeError(f"records in one file must share a dimension, got {sorted(dims)}")
        return cls(
            np.concatenate([b.entity_ids for b in blocks]).astype(np.uint64),
            np.concatenate([np.full(b.n, int(b.modality), dtype=np.uint8) for b in blocks]),
            np.concatenate([np.asarray(b.matrix, dtype=np.float32) for b in blocks]),
        )


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("entity_id", "<u8"), ("modality", "u1"), ("vector", "<f4", (dim,))])


def encode_embedding_file(records: EmbeddingRecords) -> bytes:
    vec = np.asarray(records.vectors, dtype=np.float32)
    if vec.ndim != 2:
        raise ShapeError(f"vectors must be 2-D, got {vec.shape}")
    count, dim = vec.shape
    if len(records.entity_ids) != count or len(records.modality) != count:
        raise ShapeError("entity_ids, modality and vectors disagree on the record count")
    header = np.zeros(1, dtype=_HEADER_DTYPE)
    header[0] = (FILE_MAGIC, FILE_VERSION, 0, dim, count)
    body = np.zeros(count, dtype=_record_dtype(dim))
    body["entity_id"] = records.entity_ids
    body["modality"] = records.modality
    body["vector"] = vec
    return header.tobytes() + body.tobytes()


def decode_embedding_file(data: bytes, name: str = "<bytes>") -> EmbeddingRecords:
    hsize = _HEADER_DTYPE.itemsize
    if len(data) < hsize:
        raise ValueError(f"{name}: truncated header ({len(data)} of {hsize} bytes)")
    header = np.frombuffer(data[:hsize], dtype=_HEADER_DTYPE)[0]
    if header["magic"] != FILE_MAGIC:
        raise ValueError(f"{name}: bad magic {bytes(header['magic'])!r}, expected {FILE_MAGIC!r}")
    if header["version"] != FILE_VERSION:
        raise ValueError(f"{name}: unsupported version {int(header['version'])}")
    dim, count = int(header["dim"]), int(header["count"])
    rdt = _record_dtype(dim)
    body = len(data) - hsize
    if body < count * rdt.itemsize:
        complete = body // rdt.itemsize
        raise ValueError(
            f"{name}: truncated at record {complete} (byte offset {hsize + complete * rdt.itemsize}); "
            f"header promises {count} records of dim {dim}"
        )
    if body > count * rdt.itemsize:
        extra = body - count * rdt.itemsize
        raise ValueError(
            f"{name}: {extra} trailing bytes after {count} records of dim {dim} "
            f"(byte offset {hsize + count * rdt.itemsize}); record size or dim mismatch"
        )
    recs = np.frombuffer(data, dtype=rdt, count=count, offset=hsize)
    bad_mod = np.flatnonzero(recs["modality"] > 1)
    if bad_mod.size:
        i = int(bad_mod[0])
        raise ValueError(f"{name}: record {i} (byte offset {hsize + i * rdt.itemsize}) has modality byte {recs['modality'][i]}")
    vectors = np.array(recs["vector"], dtype=np.float32).reshape(count, dim)
    bad_val = np.flatnonzero(~np.all(np.isfinite(vectors), axis=1))
    if bad_val.size:
        i = int(bad_val[0])
        raise ValueError(f"{name}: record {i} (byte offset {hsize + i * rdt.itemsize}) has non-finite values")
    return EmbeddingRecords(
        np.array(recs["entity_id"], dtype=np.uint64),
        np.array(recs["modality"], dtype=np.uint8),
        vectors,
    )


def write_embedding_file(path, records: EmbeddingRecords) -> None:
    """Write an SMAE file.

    Layout (little-endian): ``"SMAE"``, u16 version (1), u16 reserved (0),
    u32 dim, u64 record count; then per record u64 entity id, u8 modality
    (0 = X, 1 = Y) and ``dim`` float32 values.
    """
    atomic_write_bytes(path, encode_embedding_file(records))


def read_embedding_file(path) -> EmbeddingRecords:
    path = Path(path)
    return decode_embedding_file(path.read_bytes(), str(path))


def write_dataset(out_dir, ds: Dataset) -> Path:
    """One SMAE file per split and modality plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for split in SPLITS:
        bx, by = ds.blocks(split)
        entry = {}
        for tag, block in (("x", bx), ("y", by)):
            fname = f"{split}_{tag}.smae"
            write_embedding_file(out / fname, EmbeddingRecords.from_blocks(block))
            entry[tag] = fname
        files[split] = entry
    manifest = {
        "format": "SMAE",
        "version": FILE_VERSION,
        "dim_x": ds.x.dim,
        "dim_y": ds.y.dim,
        "files": files,
    }
    if "synth" in ds.meta:
        manifest["synth"] = ds.meta["synth"]
    path = out / "manifest.json"
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return path


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    xs, ys, split = [], [], {}
    for name in SPLITS:
        entry = manifest["files"][name]
        bx = read_embedding_file(path.parent / entry["x"]).block(Modality.X)
        by = read_embedding_file(path.parent / entry["y"]).block(Modality.Y)
        xs.append(bx)
        ys.append(by)
        split[name] = sorted(set(bx.entity_ids.tolist()))
    x = EmbeddingBlock(np.concatenate([b.matrix for b in xs]), np.concatenate([b.entity_ids for b in xs]), Modality.X)
    y = EmbeddingBlock(np.concatenate([b.matrix for b in ys]), np.concatenate([b.entity_ids for b in ys]), Modality.Y)
    meta = {"manifest": str(path)}
    if "synth" in manifest:
        meta["synth"] = manifest["synth"]
    return Dataset(x, y, split, meta)


# -- batching ---------------------------------------------------------------


class EntitySampler:
    """Entity-level batches that always carry every view of each sampled entity.

    ``epoch()`` partitions the entities into batches of ``entities_per_batch``
    (a trailing single entity is folded into the previous batch so every
    batch has negatives). ``sample_batch()`` draws the next batch from a
    running sequence of epochs.
    """

    def __init__(self, x: EmbeddingBlock, y: EmbeddingBlock, entities, entities_per_batch: int, rng: Rng):
        if entities_per_batch < 2:
            raise ValueError("entities_per_batch must be at least 2")
        self.entities = sorted(int(e) for e in entities)
        if len(self.entities) < 2:
            raise ValueError(f"need at least 2 entities to form a batch, got {len(self.entities)}")
        self.x, self.y = x, y
        self.per_batch = entities_per_batch
        self.rng = rng
        self._rows_x = _rows_by_entity(x)
        self._rows_y = _rows_by_entity(y)
        missing = [e for e in self.entities if e not in self._rows_x or e not in self._rows_y]
        if missing:
            raise ValueError(f"entities without rows in both modalities: {missing[:5]}")
        self._pending: list[EntityBatch] = []

    def chunks(self, order: list[int]) -> list[list[int]]:
        out = [order[i:i + self.per_batch] for i in range(0, len(order), self.per_batch)]
        if len(out) > 1 and len(out[-1]) < 2:
            out[-2].extend(out.pop())
        return out

    def batch(self, entities) -> EntityBatch:
        rx = [r for e in entities for r in self._rows_x[e]]
        ry = [r for e in entities for r in self._rows_y[e]]
        return build_entity_batch(self.x.take(rx), self.y.take(ry))

    def epoch(self) -> Iterator[EntityBatch]:
        order = [self.entities[i] for i in self.rng.permutation(len(self.entities))]
        for chunk in self.chunks(order):
            yield self.batch(chunk)

    def fixed(self) -> Iterator[EntityBatch]:
        """Deterministic batches in sorted entity order (for validation)."""
        for chunk in self.chunks(list(self.entities)):
            yield self.batch(chunk)

    def sample_batch(self) -> EntityBatch:
        if not self._pending:
            self._pending = list(self.epoch())[::-1]
        return self._pending.pop()


def _rows_by_entity(block: EmbeddingBlock) -> dict[int, list[int]]:
    rows: dict[int, list[int]] = {}
    for i, e in enumerate(block.entity_ids.tolist()):
        rows.setdefault(e, []).append(i)
    return rows


def sample_batch(ds: Dataset, split: str, entities_per_batch: int, rng: Rng) -> EntityBatch:
    """One batch of distinct entities from ``split`` with all their views."""
    return EntitySampler(ds.x, ds.y, ds.split[split], entities_per_batch, rng).sample_batch()


def singleton_pairs(x: EmbeddingBlock, y: EmbeddingBlock) -> tuple[EmbeddingBlock, EmbeddingBlock, dict[int, int]]:
    """Break each entity's views into independent (x, y) pairs.

    Entity ``e`` with ``a`` X views and ``b`` Y views becomes ``max(a, b)``
    pseudo-entities, each holding one X view and one Y view; the shorter
    side is cycled so every instance is used. Returns the new blocks and
    the map from pseudo-entity id to original entity.
    """
    rows_x, rows_y = _rows_by_entity(x), _rows_by_entity(y)
    px, py, ids, origin = [], [], [], {}
    next_id = 0
    for e in sorted(rows_x):
        ax, ay = rows_x[e], rows_y[e]
        for k in range(max(len(ax), len(ay))):
            px.append(ax[k % len(ax)])
            py.append(ay[k % len(ay)])
            ids.append(next_id)
            origin[next_id] = e
            next_id += 1
    return (
        EmbeddingBlock(x.matrix[px], ids, Modality.X),
        EmbeddingBlock(y.matrix[py], ids, Modality.Y),
        origin,
    )


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    if not os.access(p, os.W_OK):
        raise PermissionError(f"{p} is not writable")
    return p
