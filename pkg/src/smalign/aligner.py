"""Projection heads from frozen-encoder space into the shared space.

Two kinds are supported:

* ``linear``: ``normalize(x W + b)``
* ``glu``:    ``normalize(((x W_value + b_value) * sigmoid(x W_gate + b_gate)) W_out + b_out)``

Weights are stored (fan_in, fan_out) so rows of ``x`` are instances.
Checkpoints use a small binary layout, see :func:`write_heads`.
"""

from __future__ import annotations

import io
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .sets import EmbeddingBlock
from .tensor import (
    ACCUM,
    Rng,
    ShapeError,
    matmul,
    row_l2_normalize,
    row_l2_normalize_backward,
    sigmoid,
)

KINDS = ("linear", "glu")
HEAD_MAGIC = b"SMAH"
HEAD_VERSION = 1
_HEADER = struct.Struct("<4sHBBIII")


def _param_shapes(kind: str, in_dim: int, hidden: int, out_dim: int, bias: bool):
    if kind == "linear":
        shapes = [("W", (in_dim, out_dim)), ("b", (out_dim,))]
    elif kind == "glu":
        shapes = [
            ("W_value", (in_dim, hidden)),
            ("b_value", (hidden,)),
            ("W_gate", (in_dim, hidden)),
            ("b_gate", (hidden,)),
            ("W_out", (hidden, out_dim)),
            ("b_out", (out_dim,)),
        ]
    else:
        raise ValueError(f"unknown head kind {kind!r}; expected one of {KINDS}")
    if not bias:
        shapes = [(n, s) for n, s in shapes if not n.startswith("b")]
    return shapes


class AlignHead:
    def __init__(self, kind: str, in_dim: int, out_dim: int, hidden: int | None = None,
                 bias: bool = True, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.kind = kind
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden = int(hidden if hidden is not None else out_dim) if kind == "glu" else 0
        self.bias = bool(bias)
        self.shapes = _param_shapes(kind, self.in_dim, self.hidden, self.out_dim, self.bias)
        if params is None:
            params = self._init(Rng(seed))
        self.params = {}
        self.update(params)

    def _init(self, rng: Rng) -> dict[str, np.ndarray]:
        out = {}
        for name, shape in self.shapes:
            if name.startswith("W"):
                bound = 1.0 / math.sqrt(shape[0])
                out[name] = rng.uniform(-bound, bound, shape).astype(np.float32)
            else:
                out[name] = np.zeros(shape, dtype=np.float32)
        return out

    def update(self, params: dict[str, np.ndarray]) -> None:
        """Replace the parameter snapshot (the only mutation a head allows)."""
        new = {}
        for name, shape in self.shapes:
            arr = np.asarray(params[name])
            # float64 snapshots are kept as-is for finite-difference checks
            arr = np.array(arr, dtype=np.float64 if arr.dtype == np.float64 else np.float32)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            new[name] = arr
        self.params = new

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes)

    def _b(self, name):
        return self.params[name].astype(ACCUM) if self.bias else 0.0

    def _forward(self, x: np.ndarray):
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"head expects (n, {self.in_dim}) input, got {x.shape}")
        p = self.params
        if self.kind == "linear":
            o = matmul(x, p["W"]).astype(ACCUM) + self._b("b")
            return o, {"x": x}
        v = matmul(x, p["W_value"]).astype(ACCUM) + self._b("b_value")
        g = sigmoid(matmul(x, p["W_gate"]).astype(ACCUM) + self._b("b_gate"))
        h = v * g
        o = matmul(h, p["W_out"].astype(ACCUM)) + self._b("b_out")
        return o, {"x": x, "v": v, "g": g, "h": h}

    def forward(self, x: np.ndarray) -> np.ndarray:
        o, _ = self._forward(x)
        return row_l2_normalize(o).astype(np.float32)

    def project(self, block: EmbeddingBlock) -> EmbeddingBlock:
        return EmbeddingBlock(self.forward(block.matrix), block.entity_ids, block.modality)

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        """Parameter gradients and input gradient for upstream ``grad_out``.

        ``grad_out`` is the gradient w.r.t. the normalised output; the
        normalisation Jacobian is applied here.
        """
        o, cache = self._forward(x)
        grad_out = np.asarray(grad_out, dtype=ACCUM)
        if grad_out.shape != o.shape:
            raise ShapeError(f"grad_out shape {grad_out.shape} does not match output {o.shape}")
        do = row_l2_normalize_backward(o, grad_out)
        x64 = np.asarray(x, dtype=ACCUM)
        p = self.params
        grads: dict[str, np.ndarray] = {}
        if self.kind == "linear":
            grads["W"] = matmul(x64.T, do)
            if self.bias:
                grads["b"] = do.sum(axis=0)
            dx = matmul(do, p["W"].T.astype(ACCUM))
        else:
            v, g, h = cache["v"], cache["g"], cache["h"]
            grads["W_out"] = matmul(h.T, do)
            dh = matmul(do, p["W_out"].T.astype(ACCUM))
            dv = dh * g
            dg = dh * v * g * (1.0 - g)
            grads["W_value"] = matmul(x64.T, dv)
            grads["W_gate"] = matmul(x64.T, dg)
            if self.bias:
                grads["b_out"] = do.sum(axis=0)
                grads["b_value"] = dv.sum(axis=0)
                grads["b_gate"] = dg.sum(axis=0)
            dx = matmul(dv, p["W_value"].T.astype(ACCUM)) + matmul(dg, p["W_gate"].T.astype(ACCUM))
        ordered = {name: grads[name] for name, _ in self.shapes}
        return ordered, dx

    def copy(self) -> "AlignHead":
        return AlignHead(self.kind, self.in_dim, self.out_dim, self.hidden or None, self.bias, self.params)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_HEADER.pack(HEAD_MAGIC, HEAD_VERSION, KINDS.index(self.kind), int(self.bias),
                               self.in_dim, self.hidden, self.out_dim))
        for name, _ in self.shapes:
            buf.write(self.params[name].astype("<f4").tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_stream(cls, f) -> "AlignHead":
        raw = f.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise ValueError("truncated head header")
        magic, version, kind, bias, in_dim, hidden, out_dim = _HEADER.unpack(raw)
        if magic != HEAD_MAGIC:
            raise ValueError(f"bad head magic {magic!r}")
        if version != HEAD_VERSION:
            raise ValueError(f"unsupported head version {version}")
        if kind >= len(KINDS):
            raise ValueError(f"unknown head kind code {kind}")
        kind_name = KINDS[kind]
        params = {}
        for name, shape in _param_shapes(kind_name, in_dim, hidden, out_dim, bool(bias)):
            n = int(np.prod(shape)) * 4
            data = f.read(n)
            if len(data) < n:
                raise ValueError(f"truncated head data in {name}")
            params[name] = np.frombuffer(data, dtype="<f4").reshape(shape)
        return cls(kind_name, in_dim, out_dim, hidden or None, bool(bias), params)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_heads(path, heads) -> None:
    """Write head records back to back.

    Each record: ``"SMAH"``, u16 version, u8 kind (0 linear, 1 glu),
    u8 has_bias, u32 in_dim, u32 hidden (0 for linear), u32 out_dim, then
    every parameter as little-endian float32 in row-major order, in the
    order W, b (linear) or W_value, b_value, W_gate, b_gate, W_out, b_out
    (glu); biases are omitted when has_bias is 0.
    """
    atomic_write_bytes(path, b"".join(h.to_bytes() for h in heads))


def read_heads(path) -> list[AlignHead]:
    data = Path(path).read_bytes()
    f = io.BytesIO(data)
    heads = []
    while f.tell() < len(data):
        heads.append(AlignHead.from_stream(f))
    if not heads:
        raise ValueError(f"{path}: no head records")
    return heads


def head_grad_check(head: AlignHead, x: np.ndarray, grad_out: np.ndarray, h: float = 1e-3, floor: float = 1e-8):
    """Check :meth:`AlignHead.backward` against central differences.

    The probe objective is ``sum(normalize(head(x)) * grad_out)`` evaluated
    in float64 with Richardson-extrapolated central differences. Every
    parameter and input coordinate is perturbed. Returns
    ``(max_rel_err, worst_name, coords_checked)``.
    """
    from .losses import central_difference, relative_error

    x0 = np.asarray(x, dtype=ACCUM)
    g = np.asarray(grad_out, dtype=ACCUM)
    base = {k: np.asarray(v, dtype=ACCUM) for k, v in head.params.items()}
    probe = AlignHead(head.kind, head.in_dim, head.out_dim, head.hidden or None, head.bias, base)
    analytic, dx = probe.backward(x0, g)

    def objective(params, xin):
        probe.update(params)
        o, _ = probe._forward(xin)
        return float((row_l2_normalize(o) * g).sum())

    worst, worst_name, checked = 0.0, "", 0
    targets = [(f"param:{k}", k) for k in base] + [("input", None)]
    for label, key in targets:
        arr = x0 if key is None else base[key]
        grad = dx if key is None else analytic[key]
        for idx in np.ndindex(arr.shape):

            def shifted(delta, key=key, idx=idx):
                moved = arr.copy()
                moved[idx] += delta
                if key is None:
                    return objective(base, moved)
                return objective({**base, key: moved}, x0)

            err = float(relative_error(grad[idx], central_difference(shifted, h), floor))
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{label}{list(idx)}"
    probe.update(base)
    return worst, worst_name, checked
