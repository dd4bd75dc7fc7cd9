"""SGD with momentum, per-expert learning-rate schemes and step decay."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, NonFiniteError
from .graphcore import Parameter
from .planner import ClassProfile, ExpertAssignment

SCHEMES = ("linear", "sqrt", "uniform")


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    scheme: str = "linear"
    milestones: tuple[float, ...] = (0.8, 0.9)
    decay: float = 0.1
    epochs: int = 60
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        if not self.base_lr > 0:
            raise ConfigurationError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if any(not 0 < m < 1 for m in self.milestones):
            raise ConfigurationError("milestones are epoch fractions in (0, 1)")
        if any(a >= b for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigurationError("milestones must be strictly increasing")
        if not 0 < self.decay < 1:
            raise ConfigurationError("decay must lie in (0, 1)")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")


def target_fraction(profile: ClassProfile, assignment: ExpertAssignment) -> float:
    """Share of training samples that fall in the expert's target categories."""
    if profile.num_classes != assignment.num_classes:
        raise ConfigurationError("assignment does not match the class profile")
    seen = sum(profile.counts[assignment.start - 1 :])
    return seen / profile.total


def expert_lr(
    scheme: str, base_lr: float, profile: ClassProfile, assignment: ExpertAssignment
) -> float:
    """Learning rate of one expert under the ``linear``, ``sqrt`` or ``uniform`` rule."""
    if scheme == "uniform":
        return base_lr
    ratio = target_fraction(profile, assignment)
    if scheme == "linear":
        return base_lr * ratio
    if scheme == "sqrt":
        return base_lr * math.sqrt(ratio)
    raise ConfigurationError(f"unknown scheme {scheme!r}")


def milestone_epochs(config: OptimConfig) -> list[int]:
    return [math.floor(m * config.epochs) for m in config.milestones]


def scheduled_lr(lr: float, epoch: int, config: OptimConfig) -> float:
    passed = sum(epoch >= m for m in milestone_epochs(config))
    return lr * config.decay**passed


def sgd_step(
    params: Iterable[Parameter], lr: float, momentum: float, weight_decay: float = 0.0
) -> None:
    """In-place momentum SGD: ``v = momentum * v + g``; ``p -= lr * v``.

    All gradients are validated before any parameter moves; the gradients
    are zeroed afterwards.
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.sum(~np.isfinite(p.grad)))
            raise NonFiniteError(f"{p.name or 'parameter'}: {bad} non-finite gradient entries")
    for p in params:
        g = p.grad + weight_decay * p.value if weight_decay else p.grad
        p.velocity *= momentum
        p.velocity += g
        p.value -= lr * p.velocity
        p.zero_grad()
