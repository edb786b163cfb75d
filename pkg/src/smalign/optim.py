"""Lion and plain SGD over dicts of named numpy parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    step: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    def buffer(self, name: str, like: np.ndarray) -> np.ndarray:
        m = self.momentum.get(name)
        if m is None:
            m = np.zeros_like(like, dtype=np.float32)
        elif m.shape != np.shape(like):
            raise ValueError(f"momentum for {name} has shape {m.shape}, parameter has {np.shape(like)}")
        return m


def _check_grads(params, grads):
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, parameter has {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"step rejected: {bad} non-finite gradient entries in {name}")


def lion_step(params: dict, grads: dict, state: OptimState) -> tuple[dict, OptimState]:
    """One Lion update.

    ``c = b1 m + (1 - b1) g``; ``p <- p - lr (sign(c) + wd p)``;
    ``m <- b2 m + (1 - b2) g``. Returns new dicts; inputs are not modified.
    """
    _check_grads(params, grads)
    new_params, new_m = {}, {}
    for name, p in params.items():
        p64 = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.buffer(name, p).astype(np.float64)
        c = state.beta1 * m + (1 - state.beta1) * g
        update = np.sign(c) + state.weight_decay * p64
        new_params[name] = (p64 - state.lr * update).astype(np.asarray(p).dtype)
        new_m[name] = (state.beta2 * m + (1 - state.beta2) * g).astype(np.float32)
    state = OptimState(state.lr, state.beta1, state.beta2, state.weight_decay, state.step + 1, new_m)
    return new_params, state


def sgd_step(params: dict, grads: dict, state: OptimState) -> tuple[dict, OptimState]:
    _check_grads(params, grads)
    new_params = {
        name: (np.asarray(p, dtype=np.float64) - state.lr * np.asarray(grads[name], dtype=np.float64)).astype(
            np.asarray(p).dtype
        )
        for name, p in params.items()
    }
    state = OptimState(state.lr, state.beta1, state.beta2, state.weight_decay, state.step + 1, dict(state.momentum))
    return new_params, state


OPTIMIZERS = {"lion": lion_step, "sgd": sgd_step}
