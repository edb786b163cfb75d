"""Dense matrix primitives with fixed-order reductions.

Matrices are plain 2-D numpy arrays. Storage is float32; every reduction
accumulates in float64 and, where the order matters for reproducibility,
runs sequentially over the reduced axis. Each differentiable primitive
has a matching ``*_backward`` (vector-Jacobian product) or returns the
weights needed to chain its gradient.
"""

from __future__ import annotations

import math

import numpy as np

STORAGE = np.float32
ACCUM = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(data, dtype=STORAGE) -> np.ndarray:
    """Validate and copy ``data`` into a read-only 2-D matrix."""
    m = np.array(data, dtype=dtype, copy=True, order="C")
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite values")
    m.setflags(write=False)
    return m


def _out_dtype(*arrays):
    if all(a.dtype == STORAGE for a in arrays):
        return STORAGE
    return ACCUM


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated in float64, sequentially over the inner axis.

    The result is bitwise identical to a naive triple loop that sums
    ``float(a[i, k]) * float(b[k, j])`` for ``k = 0, 1, ...`` in double
    precision and rounds once at the end.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    a64 = a.astype(ACCUM, copy=False)
    b64 = b.astype(ACCUM, copy=False)
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=ACCUM)
    with np.errstate(over="ignore", invalid="ignore"):  # reported below instead
        for k in range(a.shape[1]):
            acc += np.multiply.outer(a64[:, k], b64[k, :])
    return _check_finite(acc.astype(_out_dtype(a, b)), "matmul")


def row_norms(m: np.ndarray) -> np.ndarray:
    m64 = np.asarray(m, dtype=ACCUM)
    return np.sqrt((m64 * m64).sum(axis=1))


def row_l2_normalize(m: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Divide each row by ``max(||row||, eps)``; zero rows stay zero."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    denom = np.maximum(row_norms(m), eps)
    out = np.asarray(m, dtype=ACCUM) / denom[:, None]
    return _check_finite(out.astype(_out_dtype(m)), "row_l2_normalize")


def row_l2_normalize_backward(m: np.ndarray, grad_out: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Gradient of ``row_l2_normalize`` w.r.t. its input.

    For rows with norm >= eps this is ``(g - u (u . g)) / ||m||``; guarded
    rows are a plain division by eps.
    """
    m64 = np.asarray(m, dtype=ACCUM)
    g = np.asarray(grad_out, dtype=ACCUM)
    if m64.shape != g.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match input {m64.shape}")
    norms = row_norms(m64)
    active = norms >= eps
    denom = np.where(active, norms, eps)
    u = m64 / denom[:, None]
    radial = np.where(active, (u * g).sum(axis=1), 0.0)
    return (g - u * radial[:, None]) / denom[:, None]


def logsumexp(v, tau: float = 1.0) -> float:
    """``tau * log(sum(exp(v / tau)))`` with max subtraction."""
    v = np.asarray(v, dtype=ACCUM).ravel()
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    top = v.max()
    total = 0.0
    for z in (v - top) / tau:
        total += math.exp(z)
    return float(top + tau * math.log(total))


def smoothmin(v, tau: float = 1.0) -> float:
    return -logsumexp(-np.asarray(v, dtype=ACCUM), tau)


def masked_max(values: np.ndarray, mask: np.ndarray, tau: float | None = None):
    """Row-wise (smooth) maximum over the entries selected by ``mask``.

    Returns ``(value, weights)`` where ``weights[i, j]`` is the derivative
    of ``value[i]`` with respect to ``values[i, j]``. ``tau=None`` gives the
    exact max with a one-hot subgradient on the first maximiser; otherwise
    the max is ``tau * logsumexp(values / tau)`` and the weights are the
    masked softmax. Every row must select at least one entry.
    """
    values = np.asarray(values, dtype=ACCUM)
    mask = np.asarray(mask, dtype=bool)
    if values.shape != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match values {values.shape}")
    if not np.all(mask.any(axis=1)):
        raise ValueError("masked_max: a row selects no entries")
    masked = np.where(mask, values, -np.inf)
    top = masked.max(axis=1)
    if tau is None:
        first = np.argmax(masked, axis=1)
        weights = np.zeros_like(values)
        weights[np.arange(values.shape[0]), first] = 1.0
        return top, weights
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    e = np.where(mask, np.exp((masked - top[:, None]) / tau), 0.0)
    total = e.sum(axis=1)
    value = top + tau * np.log(total)
    return value, e / total[:, None]


def pair_min(a: np.ndarray, b: np.ndarray, tau: float | None = None):
    """Element-wise (smooth) minimum of two arrays.

    Returns ``(value, wa, wb)`` with ``wa``/``wb`` the partial derivatives.
    Hard mode breaks ties in favour of ``a``.
    """
    a = np.asarray(a, dtype=ACCUM)
    b = np.asarray(b, dtype=ACCUM)
    if tau is None:
        take_a = a <= b
        return np.where(take_a, a, b), take_a.astype(ACCUM), (~take_a).astype(ACCUM)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    low = np.minimum(a, b)
    ea = np.exp(-(a - low) / tau)
    eb = np.exp(-(b - low) / tau)
    total = ea + eb
    return low - tau * np.log(total), ea / total, eb / total


def softplus(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=ACCUM)
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=ACCUM)
    return np.exp(-np.logaddexp(0.0, -z))


class Rng:
    """Seeded random source backed by numpy's PCG64 bit generator.

    PCG64 (128-bit LCG state, multiplier 0x2360ed051fc65da44385df649fccf645,
    XSL-RR output) has a fixed, platform-independent bit stream for a given
    seed. ``child(*key)`` derives an independent stream deterministically
    from the seed and the full key path, so ``r.child(1).child(2)`` and
    ``r.child(1, 2)`` coincide while ``r.child(2)`` differs.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path: tuple[int, ...] = ()
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def child(self, *key: int) -> "Rng":
        path = self.path + tuple(int(k) for k in key)
        out = Rng.__new__(Rng)
        out.seed = self.seed
        out.path = path
        out._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *path])))
        return out

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size) * scale

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bits(self, n: int) -> np.ndarray:
        """Raw 64-bit draws; the portable part of the stream."""
        return self._gen.bit_generator.random_raw(n)
