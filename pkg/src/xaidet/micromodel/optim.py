"""AdamW with decoupled weight decay and a reduce-on-plateau LR schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimState, frozen=()) -> tuple[dict, OptimState]:
    """One AdamW update, in place on ``params`` and ``state``.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)

    Names in ``frozen`` are skipped entirely: no moment update, no decay.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        if name in frozen:
            continue
        theta = params[name]
        if theta.shape != g.shape:
            raise InputError(f"gradient shape {g.shape} does not match {name} {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * theta
        theta -= state.lr * step
    return params, state


@dataclass
class PlateauState:
    current_lr: float = 1e-3
    patience: int = 5
    factor: float = 0.1
    min_delta: float = 1e-4
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise InputError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise InputError(f"patience must be >= 1, got {self.patience}")


def plateau_step(state: PlateauState, val_loss: float) -> PlateauState:
    """Count epochs without improvement; cut the LR once the count exceeds patience."""
    if not math.isfinite(val_loss):
        raise InputError(f"validation loss must be finite, got {val_loss}")
    if val_loss < state.best_val_loss - state.min_delta:
        state.best_val_loss = val_loss
        state.epochs_since_improvement = 0
        return state
    state.epochs_since_improvement += 1
    if state.epochs_since_improvement > state.patience:
        state.current_lr *= state.factor
        state.epochs_since_improvement = 0
    return state
