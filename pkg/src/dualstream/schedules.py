"""Learning-rate warmup+cosine schedule, EMA coefficient schedule, and the
moving-average update of the momentum parameter groups."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, ContractError
from . import tree as tr

FLOOR_LR = 1e-6


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: int
    total_steps: int
    floor_lr: float = FLOOR_LR

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"need 0 <= warmup ({self.warmup_steps}) < total ({self.total_steps})"
            )
        if self.base_lr <= self.floor_lr:
            raise ConfigError(f"base lr {self.base_lr} must exceed floor {self.floor_lr}")


@dataclass(frozen=True)
class TauSchedule:
    tau_base: float = 0.99
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.tau_base <= 1.0:
            raise ConfigError(f"tau_base must lie in [0,1], got {self.tau_base}")


def base_lr_for(batch_size: int) -> float:
    """Linear batch-size scaling: 0.05 * batch / 256."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    return 0.05 * batch_size / 256.0


def lr_at(sched: LrSchedule, t: int) -> float:
    """Linear warmup from the floor, then cosine decay to zero."""
    if not 0 <= t <= sched.total_steps:
        raise ContractError(f"step {t} outside [0, {sched.total_steps}]")
    if t < sched.warmup_steps:
        a = t / sched.warmup_steps
        return (1.0 - a) * sched.floor_lr + a * sched.base_lr
    if sched.warmup_steps == sched.total_steps:
        return sched.base_lr
    frac = (t - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.base_lr * (math.cos(math.pi * frac) + 1.0) / 2.0


def tau_at(sched: TauSchedule, t: int) -> float:
    """tau = 1 - (1 - tau_base) * (cos(pi t / T) + 1) / 2."""
    if not 0 <= t <= sched.total_steps:
        raise ContractError(f"step {t} outside [0, {sched.total_steps}]")
    return 1.0 - (1.0 - sched.tau_base) * (math.cos(math.pi * t / sched.total_steps) + 1.0) / 2.0


def ema_update(online_tree, momentum_tree, tau: float) -> None:
    """m <- tau * m + (1 - tau) * o elementwise over mirrored trees."""
    for _, o, m in tr.zip_leaves(online_tree, momentum_tree):
        m.data *= tau
        m.data += (1.0 - tau) * o.data
