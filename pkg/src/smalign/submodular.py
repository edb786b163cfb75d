"""Set functions, facility-location SMI measures and brute-force property checks.

Kernels here are rectangular: rows index one side of the ground set and
columns the other, so ``flqmi(A, Q, s) == flqmi(Q, A, s.T)``. Set arguments
are sequences of row/column indices. ``tau=None`` evaluates the exact
min/max; a positive ``tau`` swaps in log-sum-exp smoothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ACCUM, Rng, ShapeError, masked_max, matmul, pair_min, row_l2_normalize

SCALE_MIN = 1.0
SCALE_MAX = 100.0


@dataclass(frozen=True)
class SimilarityKernel:
    """Cross-modal cosine similarities with a log-parameterised logit scale."""

    s: np.ndarray
    log_scale: float = 0.0

    @property
    def scale(self) -> float:
        return float(np.clip(math.exp(self.log_scale), SCALE_MIN, SCALE_MAX))

    @property
    def scale_is_clamped(self) -> bool:
        raw = math.exp(self.log_scale)
        return not (SCALE_MIN < raw < SCALE_MAX)

    @property
    def logits(self) -> np.ndarray:
        return np.asarray(self.s, dtype=ACCUM) * self.scale


def cosine_kernel(x: np.ndarray, y: np.ndarray, log_scale: float = 0.0) -> SimilarityKernel:
    s = matmul(row_l2_normalize(x), row_l2_normalize(y).T)
    return SimilarityKernel(np.clip(s, -1.0, 1.0), log_scale)


def _matrix(k) -> np.ndarray:
    if isinstance(k, SimilarityKernel):
        return k.logits
    m = np.asarray(k, dtype=ACCUM)
    if m.ndim != 2:
        raise ShapeError(f"kernel must be 2-D, got shape {m.shape}")
    return m


def _index(name: str, idx: Sequence[int], bound: int) -> np.ndarray:
    arr = np.asarray(list(idx), dtype=np.intp)
    if arr.size == 0:
        raise ValueError(f"set {name} is empty")
    if arr.min() < 0 or arr.max() >= bound:
        raise IndexError(f"set {name} has indices outside [0, {bound})")
    return arr


def _set_max(s: np.ndarray, rows: np.ndarray, cols: np.ndarray, tau) -> np.ndarray:
    sub = s[np.ix_(rows, cols)]
    value, _ = masked_max(sub, np.ones_like(sub, dtype=bool), tau)
    return value


def flvmi(U, A, Q, k, tau: float | None = None) -> float:
    """``sum_{i in U} min(max_{j in A} s_ij, max_{j in Q} s_ij)``."""
    s = _matrix(k)
    u = _index("U", U, s.shape[0])
    a = _index("A", A, s.shape[1])
    q = _index("Q", Q, s.shape[1])
    val, _, _ = pair_min(_set_max(s, u, a, tau), _set_max(s, u, q, tau), tau)
    return float(val.sum())


def flqmi(A, Q, k, tau: float | None = None) -> float:
    """``sum_{q in Q} max_{a in A} s_aq + sum_{a in A} max_{q in Q} s_aq``."""
    s = _matrix(k)
    a = _index("A", A, s.shape[0])
    q = _index("Q", Q, s.shape[1])
    cover_q = _set_max(s.T, q, a, tau)
    cover_a = _set_max(s, a, q, tau)
    return float(cover_q.sum() + cover_a.sum())


def quadratic_smi(X, Y) -> float:
    """SMI of ``f(S) = -(sum S)^2`` with the cross term taken as ``2 sum(X) sum(Y)``.

    Equals ``-(sum X - sum Y)^2``, so it peaks when the two sets balance.
    """
    X = np.asarray(X, dtype=ACCUM)
    Y = np.asarray(Y, dtype=ACCUM)
    if X.size == 0 or Y.size == 0:
        raise ValueError("quadratic_smi needs nonempty sets")
    sx, sy = float(X.sum()), float(Y.sum())
    return -sx * sx - sy * sy + 2.0 * sx * sy


def quadratic_smi_grad(X, Y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=ACCUM)
    Y = np.asarray(Y, dtype=ACCUM)
    diff = float(X.sum() - Y.sum())
    return np.full(X.shape, -2.0 * diff), np.full(Y.shape, 2.0 * diff)


def centroid_gap_1d(X, Y) -> float:
    return abs(float(np.mean(X)) - float(np.mean(Y)))


# -- ground-set functions ----------------------------------------------------


class FacilityLocation:
    """``f(A) = sum_{i in V} max_{j in A} s_ij`` with ``f({}) = 0``; needs ``s >= 0``."""

    def __init__(self, sim):
        sim = np.asarray(sim, dtype=ACCUM)
        if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
            raise ShapeError(f"facility location needs a square kernel, got {sim.shape}")
        if np.any(sim < 0):
            raise ValueError("facility location needs a nonnegative kernel")
        self.sim = sim
        self.ground_size = sim.shape[0]

    def __call__(self, subset: Sequence[int]) -> float:
        idx = list(subset)
        if not idx:
            return 0.0
        return float(self.sim[:, idx].max(axis=1).sum())


class QuadraticNegSumSq:
    """``f(A) = -(sum_{a in A} v_a)^2``; submodular when all values share a sign."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=ACCUM).ravel()
        self.ground_size = self.values.size

    def __call__(self, subset: Sequence[int]) -> float:
        total = float(self.values[list(subset)].sum()) if len(subset) else 0.0
        return -total * total


class Modular:
    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=ACCUM).ravel()
        self.ground_size = self.weights.size

    def __call__(self, subset: Sequence[int]) -> float:
        return float(self.weights[list(subset)].sum()) if len(subset) else 0.0


# -- property checks ---------------------------------------------------------


@dataclass
class SubmodularityReport:
    ground_size: int
    pairs_checked: int
    exhaustive: bool
    min_margin: float
    violations: list[tuple[tuple[int, ...], tuple[int, ...], float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _members(mask: int, n: int) -> tuple[int, ...]:
    return tuple(i for i in range(n) if mask >> i & 1)


def check_submodular(
    f: Callable[[Sequence[int]], float],
    ground_size: int | None = None,
    trials: int = 10_000,
    rng: Rng | None = None,
    slack: float = -1e-9,
    max_violations: int = 20,
) -> SubmodularityReport:
    """Test ``f(A) + f(B) >= f(A | B) + f(A & B)`` over subset pairs.

    All ``4**n`` ordered pairs are checked when that is at most 1e5;
    otherwise ``trials`` random pairs are drawn from ``rng``.
    """
    n = ground_size if ground_size is not None else f.ground_size
    exhaustive = 4**n <= 100_000
    if exhaustive:
        values = np.array([f(_members(m, n)) for m in range(1 << n)], dtype=ACCUM)
        a = np.arange(1 << n)[:, None]
        b = np.arange(1 << n)[None, :]
        margin = values[a] + values[b] - values[a | b] - values[a & b]
        bad = np.argwhere(margin < slack)
        violations = [
            (_members(int(i), n), _members(int(j), n), float(margin[i, j]))
            for i, j in bad[:max_violations]
        ]
        return SubmodularityReport(n, margin.size, True, float(margin.min()), violations)

    rng = rng or Rng(0)
    cache: dict[int, float] = {}

    def value(mask: int) -> float:
        if mask not in cache:
            cache[mask] = f(_members(mask, n))
        return cache[mask]

    min_margin = math.inf
    violations = []
    for _ in range(trials):
        bits = rng.integers(0, 2, size=(2, n))
        ma = int(sum(int(v) << i for i, v in enumerate(bits[0])))
        mb = int(sum(int(v) << i for i, v in enumerate(bits[1])))
        m = value(ma) + value(mb) - value(ma | mb) - value(ma & mb)
        min_margin = min(min_margin, m)
        if m < slack and len(violations) < max_violations:
            violations.append((_members(ma, n), _members(mb, n), m))
    return SubmodularityReport(n, trials, False, float(min_margin), violations)


@dataclass
class MonotoneReport:
    trials: int
    violations: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def smi_monotone_violations(A, A_big, Q, k, U=None, tol: float = 1e-12) -> list[str]:
    """Which of flqmi/flvmi decrease when ``A`` grows to ``A_big`` (hard mode)."""
    if not set(A) <= set(A_big):
        raise ValueError("A must be a subset of A_big")
    s = _matrix(k)
    U = range(s.shape[0]) if U is None else U
    out = []
    if flqmi(A, Q, s) > flqmi(A_big, Q, s) + tol:
        out.append("flqmi")
    if flvmi(U, A, Q, s) > flvmi(U, A_big, Q, s) + tol:
        out.append("flvmi")
    return out


def check_smi_monotone(
    k, trials: int = 200, rng: Rng | None = None, grow: str = "A"
) -> MonotoneReport:
    """Random chains ``A`` ⊂ ``A'`` (or ``Q`` ⊂ ``Q'`` with ``grow="Q"``) at fixed partner.

    FLQMI monotonicity needs a nonnegative kernel; FLVMI is monotone in
    ``A`` for any kernel.
    """
    s = _matrix(k)
    if s.shape[0] != s.shape[1]:
        raise ShapeError("monotonicity chains need a square kernel")
    rng = rng or Rng(0)
    n = s.shape[0]
    report = MonotoneReport(trials)
    for t in range(trials):
        order = rng.permutation(n).tolist()
        cut = int(rng.integers(1, n))
        cut_big = int(rng.integers(cut, n + 1))
        small, big = order[:cut], order[:cut_big]
        partner = rng.permutation(n)[: int(rng.integers(1, n + 1))].tolist()
        if grow == "A":
            bad = smi_monotone_violations(small, big, partner, s)
        else:
            # grow the query side; flqmi is symmetric under (A, Q, s) -> (Q, A, s.T)
            bad = ["flqmi"] if flqmi(partner, small, s) > flqmi(partner, big, s) + 1e-12 else []
        if bad:
            report.violations.append({"trial": t, "small": small, "big": big, "partner": partner, "failed": bad})
    return report
