"""Embedding blocks and the per-entity positive/negative set structure of a batch."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, as_matrix


class Modality(enum.IntEnum):
    X = 0  # image side
    Y = 1  # text side

    def other(self) -> "Modality":
        return Modality.Y if self is Modality.X else Modality.X


@dataclass(frozen=True)
class EmbeddingBlock:
    """Rows of instance embeddings tagged with entity ids and one modality."""

    matrix: np.ndarray
    entity_ids: np.ndarray
    modality: Modality

    def __post_init__(self):
        m = np.asarray(self.matrix)
        # float64 blocks are allowed so gradient checks can re-evaluate in double
        m = as_matrix(m, dtype=np.float64 if m.dtype == np.float64 else np.float32)
        ids = np.array(self.entity_ids, dtype=np.uint64).ravel()
        if ids.shape[0] != m.shape[0]:
            raise ShapeError(f"{ids.shape[0]} entity ids for {m.shape[0]} rows")
        ids.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "entity_ids", ids)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def take(self, rows) -> "EmbeddingBlock":
        rows = np.asarray(rows, dtype=np.intp)
        return EmbeddingBlock(self.matrix[rows], self.entity_ids[rows], self.modality)

    def with_matrix(self, matrix) -> "EmbeddingBlock":
        return EmbeddingBlock(matrix, self.entity_ids, self.modality)


def _group_rows(ids: np.ndarray) -> dict[int, tuple[int, ...]]:
    groups: dict[int, list[int]] = {}
    for row, e in enumerate(ids.tolist()):
        groups.setdefault(e, []).append(row)
    return {e: tuple(rows) for e, rows in groups.items()}


@dataclass(frozen=True)
class EntityBatch:
    """A batch partitioned into per-entity positive sets on both sides.

    Build with :func:`build_entity_batch`; the constructor does not re-check
    the partition.
    """

    x: EmbeddingBlock
    y: EmbeddingBlock
    entities: tuple[int, ...]
    index_of_x: dict[int, tuple[int, ...]] = field(repr=False)
    index_of_y: dict[int, tuple[int, ...]] = field(repr=False)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    def rows(self, modality: Modality, entity: int) -> tuple[int, ...]:
        index = self.index_of_x if Modality(modality) is Modality.X else self.index_of_y
        return index[entity]

    def labels(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense entity position (0..N-1) for every row of x and y."""
        pos = {e: i for i, e in enumerate(self.entities)}
        lx = np.fromiter((pos[e] for e in self.x.entity_ids.tolist()), dtype=np.intp, count=self.x.n)
        ly = np.fromiter((pos[e] for e in self.y.entity_ids.tolist()), dtype=np.intp, count=self.y.n)
        return lx, ly

    def with_blocks(self, x_matrix, y_matrix) -> "EntityBatch":
        """Same partition over replacement matrices (e.g. projected embeddings)."""
        return EntityBatch(
            self.x.with_matrix(x_matrix),
            self.y.with_matrix(y_matrix),
            self.entities,
            self.index_of_x,
            self.index_of_y,
        )

    def swapped(self) -> "EntityBatch":
        return EntityBatch(self.y, self.x, self.entities, self.index_of_y, self.index_of_x)


def build_entity_batch(x: EmbeddingBlock, y: EmbeddingBlock) -> EntityBatch:
    if x.n == 0 or y.n == 0:
        raise ValueError("cannot build a batch from an empty block")
    gx = _group_rows(x.entity_ids)
    gy = _group_rows(y.entity_ids)
    only_x = sorted(set(gx) - set(gy))
    only_y = sorted(set(gy) - set(gx))
    if only_x or only_y:
        raise ValueError(
            f"entities missing a modality: only in X {only_x[:5]}, only in Y {only_y[:5]}"
        )
    entities = tuple(sorted(gx))
    return EntityBatch(x, y, entities, gx, gy)


def negative_index_sets(
    b: EntityBatch, entity: int, anchor: Modality = Modality.X
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Anchor rows of ``entity`` and the other-side rows of every other entity.

    With ``anchor=Modality.Y`` the roles of the two blocks are swapped.
    """
    if entity not in b.index_of_x:
        raise KeyError(f"entity {entity} is not in the batch")
    if b.num_entities < 2:
        raise ValueError("a single-entity batch has no negatives")
    anchor = Modality(anchor)
    own = b.rows(anchor, entity)
    other = anchor.other()
    theirs = tuple(
        r for e in b.entities if e != entity for r in b.rows(other, e)
    )
    return own, tuple(sorted(theirs))
