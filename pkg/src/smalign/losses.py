"""Set-based alignment losses (FLQMIA, FLVMIA) and pairwise baselines.

Every loss takes an :class:`EntityBatch` of projected embeddings, builds the
cosine kernels on L2-normalised rows, and returns a :class:`LossReport`
holding the value to *minimise* plus gradients for both blocks and the
logit-scale parameter.

Before any reduction the rows of each block are put in a canonical order
(entity, then the row's values lexicographically), so the result does not
depend on how entities or views were ordered in the batch.
"""

from __future__ import annotations

import inspect
import math
from dataclasses import dataclass

import numpy as np

from .sets import EntityBatch
from .submodular import SCALE_MAX, SCALE_MIN
from .tensor import (
    ACCUM,
    masked_max,
    matmul,
    pair_min,
    row_l2_normalize,
    row_l2_normalize_backward,
    sigmoid,
    softplus,
)

LOG_SCALE_INIT = math.log(1 / 0.07)
SIGLIP_BIAS_INIT = -10.0
NEGATIVE_MODES = ("contrast", "strict")


@dataclass
class LossReport:
    value: float
    grad_x: np.ndarray
    grad_y: np.ndarray
    grad_log_scale: float
    grad_bias: float = 0.0


class _Prepared:
    """Canonically ordered, normalised view of a batch plus its labels."""

    def __init__(self, b: EntityBatch, log_scale: float, min_entities: int = 2):
        if b.num_entities < min_entities:
            raise ValueError(f"loss needs at least {min_entities} entities, batch has {b.num_entities}")
        lx, ly = b.labels()
        self.perm_x = _canonical_order(b.x.matrix, lx)
        self.perm_y = _canonical_order(b.y.matrix, ly)
        self.x = np.asarray(b.x.matrix, dtype=ACCUM)[self.perm_x]
        self.y = np.asarray(b.y.matrix, dtype=ACCUM)[self.perm_y]
        self.lx = lx[self.perm_x]
        self.ly = ly[self.perm_y]
        self.xn = row_l2_normalize(self.x)
        self.yn = row_l2_normalize(self.y)
        raw = math.exp(log_scale)
        self.scale = min(max(raw, SCALE_MIN), SCALE_MAX)
        self.dscale = raw if SCALE_MIN < raw < SCALE_MAX else 0.0
        self.cxy = matmul(self.xn, self.yn.T)
        self.pos_xy = self.lx[:, None] == self.ly[None, :]

    def contrast(self, pos: np.ndarray, negatives: str) -> np.ndarray:
        if negatives == "contrast":
            return np.ones_like(pos)
        if negatives == "strict":
            return ~pos
        raise ValueError(f"negatives must be one of {NEGATIVE_MODES}, got {negatives!r}")

    def finish(self, value: float, d_cxy, d_cxx=None, d_cyy=None, d_log_scale=0.0, grad_bias=0.0) -> LossReport:
        """Chain cosine-kernel gradients back to the raw rows and undo the sort."""
        gxn = matmul(d_cxy, self.yn)
        gyn = matmul(d_cxy.T, self.xn)
        if d_cxx is not None:
            gxn = gxn + matmul(d_cxx + d_cxx.T, self.xn)
        if d_cyy is not None:
            gyn = gyn + matmul(d_cyy + d_cyy.T, self.yn)
        gx = np.empty_like(self.x)
        gy = np.empty_like(self.y)
        gx[self.perm_x] = row_l2_normalize_backward(self.x, gxn)
        gy[self.perm_y] = row_l2_normalize_backward(self.y, gyn)
        if not (math.isfinite(value) and np.all(np.isfinite(gx)) and np.all(np.isfinite(gy))):
            raise FloatingPointError("loss produced non-finite values")
        return LossReport(
            float(value),
            gx.astype(np.float32),
            gy.astype(np.float32),
            float(d_log_scale),
            float(grad_bias),
        )


def _canonical_order(m: np.ndarray, labels: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    keys = [m[:, c] for c in range(m.shape[1] - 1, -1, -1)] + [labels]
    return np.lexsort(keys)


def _flq_direction(logits, pos, contrast, tau):
    p, wp = masked_max(logits, pos, tau)
    n, wn = masked_max(logits, contrast, tau)
    return float((n - p).sum()), wn - wp


def loss_flqmia(
    b: EntityBatch,
    tau: float | None = 1.0,
    log_scale: float = LOG_SCALE_INIT,
    negatives: str = "contrast",
) -> LossReport:
    """Negated FLQMI alignment objective, symmetric over both directions.

    For each anchor row the loss adds ``smax(negatives) - smax(positives)``
    over the other modality, where ``smax`` is ``tau * logsumexp(. / tau)``
    (``tau=None``: exact max). With ``negatives="contrast"`` the negative
    maximum runs over every row of the other modality, which makes
    singleton batches reduce exactly to symmetric InfoNCE;
    ``"strict"`` restricts it to other entities' rows. The sum over all
    anchors of both directions is divided by the number of anchors.
    """
    pr = _Prepared(b, log_scale)
    lxy = pr.cxy * pr.scale
    v1, d1 = _flq_direction(lxy, pr.pos_xy, pr.contrast(pr.pos_xy, negatives), tau)
    pos_yx = pr.pos_xy.T
    v2, d2 = _flq_direction(lxy.T, pos_yx, pr.contrast(pos_yx, negatives), tau)
    count = lxy.shape[0] + lxy.shape[1]
    d_logits = (d1 + d2.T) / count
    value = (v1 + v2) / count
    d_log = float((d_logits * pr.cxy).sum()) * pr.dscale
    return pr.finish(value, d_logits * pr.scale, d_log_scale=d_log)


def _flv_direction(intra, own, logits, pos, contrast, tau):
    a, wa = masked_max(intra, own, tau)
    p, wp = masked_max(logits, pos, tau)
    n, wn = masked_max(logits, contrast, tau)
    mp, ap, pp = pair_min(a, p, tau)
    mn, an, nn = pair_min(a, n, tau)
    d_intra = (an - ap)[:, None] * wa
    d_logits = nn[:, None] * wn - pp[:, None] * wp
    return float((mn - mp).sum()), d_intra, d_logits


def loss_flvmia(
    b: EntityBatch,
    tau: float | None = 1.0,
    log_scale: float = LOG_SCALE_INIT,
    negatives: str = "contrast",
) -> LossReport:
    """Negated FLVMI alignment objective, symmetric over both directions.

    Per anchor ``j`` of entity ``i`` the positive term is
    ``min(max_{k in own set} s_jk, max_{k in other-side set} s_jk)`` where
    the first max uses the within-modality kernel (it includes ``j``
    itself); the negative term swaps the cross-modal max for the max over
    the negative columns. Three kernels are built: x-y, x-x and y-y.
    """
    pr = _Prepared(b, log_scale)
    cxx = matmul(pr.xn, pr.xn.T)
    cyy = matmul(pr.yn, pr.yn.T)
    own_x = pr.lx[:, None] == pr.lx[None, :]
    own_y = pr.ly[:, None] == pr.ly[None, :]
    lxy = pr.cxy * pr.scale
    pos_yx = pr.pos_xy.T
    v1, dxx, d1 = _flv_direction(
        cxx * pr.scale, own_x, lxy, pr.pos_xy, pr.contrast(pr.pos_xy, negatives), tau
    )
    v2, dyy, d2 = _flv_direction(
        cyy * pr.scale, own_y, lxy.T, pos_yx, pr.contrast(pos_yx, negatives), tau
    )
    count = lxy.shape[0] + lxy.shape[1]
    d_xy = (d1 + d2.T) / count
    dxx = dxx / count
    dyy = dyy / count
    value = (v1 + v2) / count
    d_log = float((d_xy * pr.cxy).sum() + (dxx * cxx).sum() + (dyy * cyy).sum()) * pr.dscale
    return pr.finish(value, d_xy * pr.scale, dxx * pr.scale, dyy * pr.scale, d_log)


def _nce_direction(logits, pos):
    top = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - top)
    total = e.sum(axis=1, keepdims=True)
    log_p = logits - top - np.log(total)
    n_pos = pos.sum()
    value = float(-(log_p * pos).sum()) / n_pos
    per_row = pos.sum(axis=1, keepdims=True)
    d = (per_row * e / total - pos) / n_pos
    return value, d


def loss_infonce(
    b: EntityBatch,
    temperature: float = 1.0,
    log_scale: float = LOG_SCALE_INIT,
) -> LossReport:
    """Symmetric softmax cross-entropy (CLIP / NT-Xent) over scaled logits.

    Logits are ``scale * cos / temperature``. With several views per entity
    every matched (x-view, y-view) pair counts as a positive target; each
    direction averages over its positive pairs and the two directions are
    averaged.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    pr = _Prepared(b, log_scale)
    factor = pr.scale / temperature
    lxy = pr.cxy * factor
    pos = pr.pos_xy.astype(ACCUM)
    v1, d1 = _nce_direction(lxy, pos)
    v2, d2 = _nce_direction(lxy.T, pos.T)
    d_logits = (d1 + d2.T) / 2
    value = (v1 + v2) / 2
    d_log = float((d_logits * pr.cxy).sum()) * pr.dscale / temperature
    return pr.finish(value, d_logits * factor, d_log_scale=d_log)


def loss_siglip(
    b: EntityBatch,
    temperature: float = 1.0,
    bias: float = SIGLIP_BIAS_INIT,
    log_scale: float = LOG_SCALE_INIT,
) -> LossReport:
    """Mean over all (x-view, y-view) pairs of ``softplus(-z * (scale*cos/temperature + bias))``.

    ``z`` is +1 for rows of the same entity and -1 otherwise.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    pr = _Prepared(b, log_scale)
    factor = pr.scale / temperature
    z = np.where(pr.pos_xy, 1.0, -1.0)
    logits = pr.cxy * factor + bias
    count = logits.size
    value = float(softplus(-z * logits).sum()) / count
    d_logits = -z * sigmoid(-z * logits) / count
    d_log = float((d_logits * pr.cxy).sum()) * pr.dscale / temperature
    return pr.finish(value, d_logits * factor, d_log_scale=d_log, grad_bias=float(d_logits.sum()))


LOSSES = {
    "flqmia": loss_flqmia,
    "flvmia": loss_flvmia,
    "infonce": loss_infonce,
    "siglip": loss_siglip,
}


# -- finite-difference verification -----------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: str
    coords_checked: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` element-wise."""
    a = np.asarray(analytic, dtype=ACCUM)
    n = np.asarray(numeric, dtype=ACCUM)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(f, h: float, richardson: bool = True) -> float:
    """Derivative at 0 of the scalar function ``f(delta)``.

    With ``richardson`` the steps ``h`` and ``h/2`` are combined as
    ``(4 D(h/2) - D(h)) / 3``, cancelling the O(h^2) truncation term.
    """
    d_h = (f(h) - f(-h)) / (2 * h)
    if not richardson:
        return d_h
    half = h / 2
    d_half = (f(half) - f(-half)) / (2 * half)
    return (4 * d_half - d_h) / 3


def grad_check(
    loss, b: EntityBatch, h: float = 1e-3, floor: float = 1e-8, richardson: bool = True, **kwargs
) -> GradCheckReport:
    """Central differences on every block coordinate and the scalar parameters.

    The loss is re-evaluated on float64 copies of the blocks. Scalars
    checked are ``log_scale`` and, for losses that take one, ``bias``.
    Logits carry a scale of ~14 at initialisation, so the plain O(h^2)
    error at h=1e-3 is itself around 1e-4; Richardson extrapolation is on
    by default.
    """
    params = inspect.signature(loss).parameters
    kwargs.setdefault("log_scale", params["log_scale"].default if "log_scale" in params else LOG_SCALE_INIT)
    if "bias" in params:
        kwargs.setdefault("bias", params["bias"].default)
    x0 = np.asarray(b.x.matrix, dtype=ACCUM)
    y0 = np.asarray(b.y.matrix, dtype=ACCUM)
    base = b.with_blocks(x0, y0)
    report = loss(base, **kwargs)

    def value(x, y, **override):
        return loss(b.with_blocks(x, y), **{**kwargs, **override}).value

    worst = ("", 0.0)
    checked = 0

    def record(name, analytic, numeric):
        nonlocal worst, checked
        err = float(relative_error(analytic, numeric, floor))
        checked += 1
        if err > worst[1]:
            worst = (name, err)

    for label, block, grad in (("x", x0, report.grad_x), ("y", y0, report.grad_y)):
        for idx in np.ndindex(block.shape):

            def shifted(delta, label=label, block=block, idx=idx):
                moved = block.copy()
                moved[idx] += delta
                return value(moved, y0) if label == "x" else value(x0, moved)

            num = central_difference(shifted, h, richardson)
            record(f"grad_{label}{list(idx)}", grad[idx], num)

    for name, analytic in (("log_scale", report.grad_log_scale), ("bias", report.grad_bias)):
        if name not in kwargs:
            continue
        c = kwargs[name]
        num = central_difference(lambda d: value(x0, y0, **{name: c + d}), h, richardson)
        record(name, analytic, num)
    return GradCheckReport(worst[1], worst[0], checked)
