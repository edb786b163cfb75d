"""Property suite behind ``smalign verify``.

Each check returns a :class:`CheckResult`; :func:`run_suite` collects them
into a JSON-serialisable report. Loss functions are looked up on the
:mod:`smalign.losses` module at call time, so a patched implementation is
what gets verified.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .aligner import AlignHead, head_grad_check
from .data import EmbeddingRecords, decode_embedding_file, encode_embedding_file
from .optim import OptimState, lion_step
from .sets import EmbeddingBlock, Modality, build_entity_batch
from .submodular import (
    FacilityLocation,
    Modular,
    QuadraticNegSumSq,
    centroid_gap_1d,
    check_smi_monotone,
    check_submodular,
    quadratic_smi_grad,
)
from .tensor import Rng, row_l2_normalize

LEVELS = ("fast", "full")
GRAD_TOL = 1e-4
REDUCTION_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    ok: bool
    trials: int
    seconds: float = 0.0
    failures: list[str] = field(default_factory=list)
    detail: dict = field(default_factory=dict)


@dataclass
class Budget:
    fl_kernels: int
    fl_sizes: tuple[int, ...]
    chains: int
    reduction_batches: int
    grad_batches: int
    head_batches: int
    gap_trials: int
    io_files: int


BUDGETS = {
    "fast": Budget(8, (5,), 50, 5, 3, 3, 20, 20),
    "full": Budget(50, (5, 6, 7, 8), 200, 20, 20, 20, 20, 100),
}


def random_batch(rng: Rng, n_entities: int, dim: int, max_views: int = 1) -> "losses.EntityBatch":
    """Random unit-norm batch; each entity gets 1..max_views views per side."""
    vx = rng.integers(1, max_views + 1, n_entities)
    vy = rng.integers(1, max_views + 1, n_entities)
    ids_x = np.repeat(np.arange(n_entities), vx)
    ids_y = np.repeat(np.arange(n_entities), vy)
    x = row_l2_normalize(rng.normal((ids_x.size, dim))).astype(np.float32)
    y = row_l2_normalize(rng.normal((ids_y.size, dim))).astype(np.float32)
    return build_entity_batch(EmbeddingBlock(x, ids_x, Modality.X), EmbeddingBlock(y, ids_y, Modality.Y))


def check_facility_submodular(budget: Budget, rng: Rng) -> CheckResult:
    failures, pairs = [], 0
    for t in range(budget.fl_kernels):
        n = budget.fl_sizes[t % len(budget.fl_sizes)]
        sim = rng.child(t).uniform(0.0, 1.0, (n, n))
        rep = check_submodular(FacilityLocation(sim), slack=-1e-9)
        pairs += rep.pairs_checked
        failures += [f"kernel {t}: {v}" for v in rep.violations]
    for name, f in (("modular", Modular(rng.child(90).normal(6))),
                    ("neg-sum-squared", QuadraticNegSumSq(rng.child(91).uniform(0.0, 1.0, 6)))):
        rep = check_submodular(f, slack=-1e-9)
        pairs += rep.pairs_checked
        failures += [f"{name}: {v}" for v in rep.violations]
    return CheckResult("submodularity", not failures, budget.fl_kernels + 2, failures=failures[:20],
                       detail={"pairs_checked": pairs})


def check_smi_chains(budget: Budget, rng: Rng) -> CheckResult:
    failures = []
    for i, grow in enumerate(("A", "Q")):
        k = rng.child(i).uniform(0.0, 1.0, (12, 12))
        rep = check_smi_monotone(k, trials=budget.chains, rng=rng.child(10 + i), grow=grow)
        failures += [f"grow {grow}: {v}" for v in rep.violations]
    return CheckResult("smi-monotone", not failures, 2 * budget.chains, failures=failures[:20])


def check_singleton_reduction(budget: Budget, rng: Rng) -> CheckResult:
    failures, worst_grad, worst_shift = [], 0.0, 0.0
    sizes = (4, 8, 16)
    for t in range(budget.reduction_batches):
        r = rng.child(t)
        b = random_batch(r, sizes[t % 3], 8)
        set_loss = losses.loss_flqmia(b, tau=1.0)
        pair_loss = losses.loss_infonce(b, temperature=1.0)
        diff0 = set_loss.value - pair_loss.value
        g = max(float(np.max(np.abs(set_loss.grad_x - pair_loss.grad_x))),
                float(np.max(np.abs(set_loss.grad_y - pair_loss.grad_y))))
        worst_grad = max(worst_grad, g)
        if g > REDUCTION_TOL:
            failures.append(f"batch {t}: gradient gap {g:.3e}")
        moved = b.with_blocks(b.x.matrix + r.child(1).normal(b.x.matrix.shape, 0.1).astype(np.float32),
                              b.y.matrix + r.child(2).normal(b.y.matrix.shape, 0.1).astype(np.float32))
        diff1 = losses.loss_flqmia(moved, tau=1.0).value - losses.loss_infonce(moved, temperature=1.0).value
        worst_shift = max(worst_shift, abs(diff1 - diff0))
        if abs(diff1 - diff0) > REDUCTION_TOL:
            failures.append(f"batch {t}: value difference moved by {abs(diff1 - diff0):.3e}")
    return CheckResult("singleton-reduction", not failures, budget.reduction_batches, failures=failures,
                       detail={"max_grad_gap": worst_grad, "max_value_shift": worst_shift})


def check_loss_gradients(budget: Budget, rng: Rng) -> CheckResult:
    failures, worst = [], {}
    for name in ("flqmia", "flvmia", "infonce", "siglip"):
        fn = getattr(losses, f"loss_{name}")
        worst[name] = 0.0
        for t in range(budget.grad_batches):
            r = rng.child(t)
            b = random_batch(r, int(r.integers(2, 5)), 4, max_views=3)
            kwargs = {"log_scale": float(r.uniform(0.5, 3.0, 1)[0])}
            if name in ("flqmia", "flvmia"):
                kwargs["tau"] = float(r.uniform(0.5, 2.0, 1)[0])
            rep = losses.grad_check(fn, b, **kwargs)
            worst[name] = max(worst[name], rep.max_rel_err)
            if not rep.ok(GRAD_TOL):
                failures.append(f"{name} batch {t}: rel err {rep.max_rel_err:.3e} at {rep.worst}")
    return CheckResult("loss-gradients", not failures, 4 * budget.grad_batches, failures=failures[:20],
                       detail={"max_rel_err": worst})


def check_head_gradients(budget: Budget, rng: Rng) -> CheckResult:
    failures, worst = [], {}
    for kind in ("linear", "glu"):
        worst[kind] = 0.0
        for t in range(budget.head_batches):
            r = rng.child(t)
            head = AlignHead(kind, 5, 3, hidden=4, seed=int(r.bits(1)[0]))
            err, where, _ = head_grad_check(head, r.normal((6, 5)), r.normal((6, 3)))
            worst[kind] = max(worst[kind], err)
            if err >= GRAD_TOL:
                failures.append(f"{kind} head {t}: rel err {err:.3e} at {where}")
    return CheckResult("head-gradients", not failures, 2 * budget.head_batches, failures=failures,
                       detail={"max_rel_err": worst})


def check_quadratic_gap(budget: Budget, rng: Rng, steps: int = 100, lr: float = 0.01) -> CheckResult:
    """Gradient ascent on the quadratic SMI must shrink the 1-D centroid gap every time.

    Both sets share one cardinality, as the gap is defined over a common
    divisor; with unequal sizes equal sums need not mean equal centroids.
    """
    failures = []
    for t in range(budget.gap_trials):
        r = rng.child(t)
        d = int(r.integers(2, 9))
        X, Y = r.normal(d), r.normal(d) + float(r.uniform(-3.0, 3.0, 1)[0])
        start = centroid_gap_1d(X, Y)
        for _ in range(steps):
            gx, gy = quadratic_smi_grad(X, Y)
            X, Y = X + lr * gx, Y + lr * gy
        end = centroid_gap_1d(X, Y)
        if not end < start:
            failures.append(f"trial {t}: gap {start:.6f} -> {end:.6f}")
    return CheckResult("quadratic-gap", not failures, budget.gap_trials, failures=failures)


def check_lion_bound(budget: Budget, rng: Rng) -> CheckResult:
    failures = []
    for t in range(budget.grad_batches):
        r = rng.child(t)
        p = {"w": r.normal((4, 3))}
        state = OptimState(lr=0.01, weight_decay=0.1)
        for _ in range(5):
            new, state = lion_step(p, {"w": r.normal((4, 3), 10.0)}, state)
            bound = state.lr * (1 + state.weight_decay * np.max(np.abs(p["w"])))
            step = float(np.max(np.abs(new["w"] - p["w"])))
            if step > bound * (1 + 1e-12):
                failures.append(f"trial {t}: step {step} exceeds {bound}")
            p = new
    return CheckResult("lion-bound", not failures, budget.grad_batches, failures=failures)


def check_file_round_trip(budget: Budget, rng: Rng) -> CheckResult:
    failures = []
    for t in range(budget.io_files):
        r = rng.child(t)
        n, dim = int(r.integers(0, 20)), int(r.integers(1, 9))
        recs = EmbeddingRecords(
            r.integers(0, 2**63, n).astype(np.uint64),
            r.integers(0, 2, n).astype(np.uint8),
            r.normal((n, dim)).astype(np.float32),
        )
        raw = encode_embedding_file(recs)
        if encode_embedding_file(decode_embedding_file(raw)) != raw:
            failures.append(f"file {t}: re-encoding changed bytes")
    return CheckResult("file-round-trip", not failures, budget.io_files, failures=failures)


CHECKS = (
    check_facility_submodular,
    check_smi_chains,
    check_singleton_reduction,
    check_loss_gradients,
    check_head_gradients,
    check_quadratic_gap,
    check_lion_bound,
    check_file_round_trip,
)


def run_suite(level: str = "fast", seed: int = 0) -> dict:
    """Run every property check and return ``{"level", "ok", "seconds", "checks"}``."""
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
    budget = BUDGETS[level]
    root = Rng(seed)
    results = []
    t_all = time.perf_counter()
    for i, check in enumerate(CHECKS):
        t0 = time.perf_counter()
        try:
            res = check(budget, root.child(i))
        except Exception as exc:  # a crash is a reported violation, not a traceback
            res = CheckResult(check.__name__.removeprefix("check_"), False, 0,
                              failures=[f"{type(exc).__name__}: {exc}"])
        res.seconds = round(time.perf_counter() - t0, 3)
        results.append(res)
    return {
        "level": level,
        "ok": all(r.ok for r in results),
        "seconds": round(time.perf_counter() - t_all, 3),
        "checks": [asdict(r) for r in results],
    }
