"""SGD with momentum, Adam, and per-epoch cosine annealing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class OptimizerError(RuntimeError):
    pass


@dataclass
class CosineSchedule:
    lr_max: float
    total_epochs: int
    lr_min: float = 0.0

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        if self.lr_min < 0 or self.lr_max < self.lr_min:
            raise ValueError("need 0 <= lr_min <= lr_max")


def cosine_lr(schedule: CosineSchedule, t: float) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2 for 0 <= t <= T."""
    T = schedule.total_epochs
    if not 0 <= t <= T:
        raise ValueError(f"epoch {t} outside [0, {T}]")
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * t / T))


@dataclass
class OptimState:
    algorithm: str = "sgd-momentum"
    lr: float = 1e-4
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: Optional[CosineSchedule] = None
    step_count: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("adam betas must lie in [0, 1)")

    def set_epoch(self, epoch: int) -> None:
        if self.schedule is not None:
            self.lr = cosine_lr(self.schedule, epoch)


def _trainable(model):
    items = model.named_parameters() if hasattr(model, "named_parameters") else model
    for name, tensor, trainable in items:
        if not trainable:
            continue
        if tensor.grad is None:
            raise OptimizerError(f"trainable parameter {name} has no gradient")
        yield name, tensor


def sgd_momentum_step(state: OptimState, model) -> None:
    """v <- mu v + g ; p <- p - lr v, for trainable parameters only."""
    for name, p in _trainable(model):
        buf = state.buffers.setdefault(name, {"velocity": np.zeros(p.shape, dtype=np.float64)})
        v = buf["velocity"]
        v *= state.momentum
        v += p.grad
        p.data -= (state.lr * v).astype(p.dtype)
    state.step_count += 1


def adam_step(state: OptimState, model) -> None:
    """Bias-corrected Adam update on trainable parameters only."""
    b1, b2 = state.betas
    t = state.step_count + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in _trainable(model):
        buf = state.buffers.setdefault(
            name, {"m": np.zeros(p.shape, dtype=np.float64), "v": np.zeros(p.shape, dtype=np.float64)}
        )
        g = p.grad.astype(np.float64)
        buf["m"] = b1 * buf["m"] + (1.0 - b1) * g
        buf["v"] = b2 * buf["v"] + (1.0 - b2) * g * g
        m_hat = buf["m"] / c1
        v_hat = buf["v"] / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    state.step_count = t


def step(state: OptimState, model) -> None:
    if state.algorithm == "adam":
        adam_step(state, model)
    else:
        sgd_momentum_step(state, model)
