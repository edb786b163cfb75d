"""Training loop with validation-loss early stopping and per-epoch metrics."""

from __future__ import annotations

import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses
from .aligner import KINDS, AlignHead, atomic_write_bytes
from .data import Dataset, EntitySampler, singleton_pairs
from .evaluation import eval_modality_gap, eval_retrieval
from .optim import OPTIMIZERS, OptimState
from .sets import EntityBatch
from .tensor import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    loss: str = "flqmia"
    head: str = "glu"
    out_dim: int = 32
    hidden: int | None = None
    tau: float = 1.0
    temperature: float = 1.0
    negatives: str = "contrast"
    log_scale: float = losses.LOG_SCALE_INIT
    learn_scale: bool = True
    siglip_bias: float = losses.SIGLIP_BIAS_INIT
    optimizer: str = "lion"
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    max_epochs: int = 50
    patience: int = 5
    entities_per_batch: int = 16
    singleton_pairs: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.loss not in losses.LOSSES:
            raise ValueError(f"loss must be one of {sorted(losses.LOSSES)}, got {self.loss!r}")
        if self.head not in KINDS:
            raise ValueError(f"head must be one of {KINDS}, got {self.head!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}, got {self.optimizer!r}")
        if self.negatives not in losses.NEGATIVE_MODES:
            raise ValueError(f"negatives must be one of {losses.NEGATIVE_MODES}")
        for name in ("tau", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be nonnegative")
        if self.out_dim < 1 or (self.hidden is not None and self.hidden < 1):
            raise ValueError("out_dim and hidden must be positive")
        if self.max_epochs < 0 or self.patience < 0:
            raise ValueError("max_epochs and patience must be nonnegative")
        if self.entities_per_batch < 2:
            raise ValueError("entities_per_batch must be at least 2")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown train config key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_loss: float
    recall1_i2t: float
    recall5_i2t: float
    recall1_t2i: float
    recall5_t2i: float
    centroid_gap: float
    mean_pair_gap: float
    log_scale: float
    wall_time: float

    def deterministic(self) -> dict:
        """Every field except wall-clock time."""
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class TrainResult:
    head_x: AlignHead
    head_y: AlignHead
    log_scale: float
    bias: float
    history: list[MetricsRecord]
    best_epoch: int
    best_val_loss: float
    stopped: str
    config: TrainConfig

    @property
    def heads(self) -> tuple[AlignHead, AlignHead]:
        return self.head_x, self.head_y

    def meta(self) -> dict:
        return {
            "loss": self.config.loss,
            "head": self.config.head,
            "log_scale": self.log_scale,
            "bias": self.bias,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped": self.stopped,
            "config": asdict(self.config),
        }


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss or gradient; ``result`` holds the last finite best checkpoint."""

    def __init__(self, message: str, result: TrainResult):
        super().__init__(message)
        self.result = result


class _Model:
    """Both heads plus the scalar loss parameters, flattened into one param dict."""

    def __init__(self, cfg: TrainConfig, dim_x: int, dim_y: int):
        self.cfg = cfg
        seeds = Rng(cfg.seed).child(1).bits(2)
        self.head_x = AlignHead(cfg.head, dim_x, cfg.out_dim, cfg.hidden, seed=int(seeds[0]))
        self.head_y = AlignHead(cfg.head, dim_y, cfg.out_dim, cfg.hidden, seed=int(seeds[1]))
        self.scalars = {"log_scale": float(cfg.log_scale)}
        if cfg.loss == "siglip":
            self.scalars["bias"] = float(cfg.siglip_bias)

    def params(self) -> dict[str, np.ndarray]:
        out = {f"x.{k}": v for k, v in self.head_x.params.items()}
        out.update({f"y.{k}": v for k, v in self.head_y.params.items()})
        for k, v in self.scalars.items():
            if k != "log_scale" or self.cfg.learn_scale:
                out[k] = np.array(v, dtype=np.float64)
        return out

    def load(self, params: dict[str, np.ndarray]) -> None:
        self.head_x.update({k[2:]: v for k, v in params.items() if k.startswith("x.")})
        self.head_y.update({k[2:]: v for k, v in params.items() if k.startswith("y.")})
        for k in self.scalars:
            if k in params:
                self.scalars[k] = float(params[k])

    def loss_kwargs(self) -> dict:
        cfg = self.cfg
        kw = {"log_scale": self.scalars["log_scale"]}
        if cfg.loss in ("flqmia", "flvmia"):
            kw.update(tau=cfg.tau, negatives=cfg.negatives)
        else:
            kw["temperature"] = cfg.temperature
        if cfg.loss == "siglip":
            kw["bias"] = self.scalars["bias"]
        return kw

    def loss(self, batch: EntityBatch, with_grad: bool):
        fn = getattr(losses, f"loss_{self.cfg.loss}")
        px = self.head_x.forward(batch.x.matrix)
        py = self.head_y.forward(batch.y.matrix)
        report = fn(batch.with_blocks(px, py), **self.loss_kwargs())
        if not with_grad:
            return report.value, None
        gx, _ = self.head_x.backward(batch.x.matrix, report.grad_x)
        gy, _ = self.head_y.backward(batch.y.matrix, report.grad_y)
        grads = {f"x.{k}": v for k, v in gx.items()}
        grads.update({f"y.{k}": v for k, v in gy.items()})
        if self.cfg.learn_scale:
            grads["log_scale"] = np.array(report.grad_log_scale)
        if "bias" in self.scalars:
            grads["bias"] = np.array(report.grad_bias)
        return report.value, grads

    def clamp_scale(self) -> None:
        lo, hi = math.log(losses.SCALE_MIN), math.log(losses.SCALE_MAX)
        self.scalars["log_scale"] = min(max(self.scalars["log_scale"], lo), hi)

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = {f"x.{k}": v for k, v in self.head_x.params.items()}
        snap.update({f"y.{k}": v for k, v in self.head_y.params.items()})
        snap.update({k: np.array(v, dtype=np.float64) for k, v in self.scalars.items()})
        return snap


def _mean_loss(model: _Model, sampler: EntitySampler) -> float:
    vals = [model.loss(b, with_grad=False)[0] for b in sampler.fixed()]
    return float(np.mean(vals))


def _result(model: _Model, cfg, best_snap, history, best_epoch, best_val, stopped) -> TrainResult:
    out = _Model(cfg, model.head_x.in_dim, model.head_y.in_dim)
    out.load(best_snap)
    return TrainResult(
        out.head_x, out.head_y, out.scalars["log_scale"], out.scalars.get("bias", 0.0),
        history, best_epoch, best_val, stopped, cfg,
    )


def _save_state(path: Path, state: dict) -> None:
    arrays = {}
    for group in ("params", "momentum", "best"):
        for k, v in state[group].items():
            arrays[f"{group}/{k}"] = np.asarray(v)
    info = {k: state[k] for k in ("epoch", "step", "best_epoch", "best_val", "wait", "config")}
    info["history"] = [asdict(r) for r in state["history"]]
    arrays["info"] = np.frombuffer(json.dumps(info).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_state(path) -> dict:
    with np.load(path) as z:
        info = json.loads(bytes(z["info"]).decode())
        state = {"params": {}, "momentum": {}, "best": {}}
        for key in z.files:
            if "/" in key:
                group, name = key.split("/", 1)
                state[group][name] = z[key]
    state.update({k: info[k] for k in ("epoch", "step", "best_epoch", "best_val", "wait", "config")})
    state["history"] = [MetricsRecord(**r) for r in info["history"]]
    return state


def _train_blocks(cfg: TrainConfig, data: Dataset, split: str):
    x, y = data.blocks(split)
    if cfg.singleton_pairs:
        x, y, _ = singleton_pairs(x, y)
    return x, y, sorted(set(x.entity_ids.tolist()))


def train(
    cfg: TrainConfig,
    data: Dataset,
    on_epoch: Callable[[MetricsRecord], None] | None = None,
    state_path=None,
    resume: dict | None = None,
    eval_ks=(1, 5),
) -> TrainResult:
    """Train both heads; return the checkpoint with the lowest validation loss.

    Epoch 0 records the untrained model. Each later epoch visits every
    training entity once, then evaluates train loss (fixed batches), val
    loss, val retrieval and the modality gap. Training stops after
    ``max_epochs`` or once more than ``patience`` epochs in a row fail to
    improve the val loss (``patience=0`` stops at the first non-improving
    epoch).
    Batch order depends only on ``(seed, epoch)``, so a run resumed from a
    saved state reproduces the uninterrupted run.
    """
    cfg.validate()
    for split in ("train", "val"):
        if len(data.split[split]) < 2:
            raise ValueError(f"split {split!r} needs at least 2 entities")
    model = _Model(cfg, data.x.dim, data.y.dim)
    step_fn = OPTIMIZERS[cfg.optimizer]
    opt = OptimState(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay)
    root = Rng(cfg.seed)

    tx, ty, train_entities = _train_blocks(cfg, data, "train")
    vx, vy, val_entities = _train_blocks(cfg, data, "val")
    train_eval = EntitySampler(tx, ty, train_entities, cfg.entities_per_batch, root)
    val_eval = EntitySampler(vx, vy, val_entities, cfg.entities_per_batch, root)
    raw_vx, raw_vy = data.blocks("val")
    ks = tuple(min(k, raw_vx.n, raw_vy.n) for k in eval_ks)

    def measure(epoch: int, t0: float) -> MetricsRecord:
        heads = (model.head_x, model.head_y)
        rec = eval_retrieval(heads, raw_vx, raw_vy, ks)
        cg, pg = eval_modality_gap(heads, raw_vx, raw_vy)
        return MetricsRecord(
            epoch,
            _mean_loss(model, train_eval),
            _mean_loss(model, val_eval),
            rec["i2t"][ks[0]], rec["i2t"][ks[-1]], rec["t2i"][ks[0]], rec["t2i"][ks[-1]],
            cg, pg, model.scalars["log_scale"], time.perf_counter() - t0,
        )

    t0 = time.perf_counter()
    if resume is not None:
        model.load(resume["params"])
        opt = OptimState(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, resume["step"],
                         {k: np.asarray(v, dtype=np.float32) for k, v in resume["momentum"].items()})
        history = list(resume["history"])
        start, best_epoch, best_val, wait = resume["epoch"] + 1, resume["best_epoch"], resume["best_val"], resume["wait"]
        best_snap = {k: np.asarray(v) for k, v in resume["best"].items()}
    else:
        try:
            first = measure(0, t0)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"non-finite loss at initialisation: {exc}",
                                   _result(model, cfg, model.snapshot(), [], 0, math.inf, "diverged")) from exc
        history = [first]
        if on_epoch:
            on_epoch(first)
        start, best_epoch, best_val, wait = 1, 0, first.val_loss, 0
        best_snap = model.snapshot()

    stopped = "max_epochs"
    if resume is not None and wait > cfg.patience:
        stopped = "patience"
        start = cfg.max_epochs + 1
    for epoch in range(start, cfg.max_epochs + 1):
        sampler = EntitySampler(tx, ty, train_entities, cfg.entities_per_batch, root.child(100, epoch))
        try:
            for batch in sampler.epoch():
                _, grads = model.loss(batch, with_grad=True)
                params, opt = step_fn(model.params(), grads, opt)
                model.load(params)
                model.clamp_scale()
            rec = measure(epoch, t0)
            if not all(math.isfinite(v) for v in rec.deterministic().values()):
                raise FloatingPointError(f"non-finite metrics at epoch {epoch}")
        except FloatingPointError as exc:
            msg = f"training diverged at epoch {epoch}: {exc}"
            log.error(msg)
            raise TrainingDiverged(msg, _result(model, cfg, best_snap, history, best_epoch, best_val, "diverged")) from exc
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
        log.info("epoch %d train %.5f val %.5f gap %.4f", epoch, rec.train_loss, rec.val_loss, rec.centroid_gap)
        if rec.val_loss < best_val:
            best_epoch, best_val, wait = epoch, rec.val_loss, 0
            best_snap = model.snapshot()
        else:
            wait += 1
        if state_path is not None:
            _save_state(Path(state_path), {
                "params": model.snapshot(), "momentum": opt.momentum, "best": best_snap,
                "epoch": epoch, "step": opt.step, "best_epoch": best_epoch, "best_val": best_val,
                "wait": wait, "config": asdict(cfg), "history": history,
            })
        if wait > cfg.patience:
            stopped = "patience"
            break
    return _result(model, cfg, best_snap, history, best_epoch, best_val, stopped)


def validation_loss(result: TrainResult, data: Dataset) -> float:
    """Recompute the validation loss of a returned checkpoint, exactly as training measured it."""
    cfg = result.config
    model = _Model(cfg, result.head_x.in_dim, result.head_y.in_dim)
    model.load({**{f"x.{k}": v for k, v in result.head_x.params.items()},
                **{f"y.{k}": v for k, v in result.head_y.params.items()},
                "log_scale": np.array(result.log_scale), "bias": np.array(result.bias)})
    vx, vy, entities = _train_blocks(cfg, data, "val")
    return _mean_loss(model, EntitySampler(vx, vy, entities, cfg.entities_per_batch, Rng(cfg.seed)))
