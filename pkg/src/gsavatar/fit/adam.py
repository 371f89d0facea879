"""Adam with a step-decay schedule at fixed fractions of the run."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MILESTONES = (0.75, 0.90)
DIVISOR = 10  # lr is divided by this at each milestone


class NonFiniteGradient(FloatingPointError):
    pass


def milestone_iterations(total: int, milestones=MILESTONES) -> list[int]:
    """First zero-based iteration at which each decay applies (i ≥ m·total)."""
    return [math.ceil(round(m * total, 9)) for m in milestones]


def decays_passed(iteration: int, total: int, milestones=MILESTONES) -> int:
    return sum(iteration >= m for m in milestone_iterations(total, milestones))


def lr_factor(iteration: int, total: int, milestones=MILESTONES) -> float:
    return 1.0 / DIVISOR ** decays_passed(iteration, total, milestones)


@dataclass
class AdamState:
    total_steps: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    group_lr: dict[str, float] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)
    milestones: tuple[float, ...] = MILESTONES
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)
    step_count: int = 0

    def base_lr(self, name: str) -> float:
        """Per-group learning rate; a group is the part of the name before the first dot."""
        if name in self.group_lr:
            return self.group_lr[name]
        return self.group_lr.get(name.split(".", 1)[0], self.lr)

    def lr_at(self, iteration: int, name: str | None = None) -> float:
        base = self.lr if name is None else self.base_lr(name)
        # dividing by an exact power of ten keeps 1e-3 -> 1e-4 -> 1e-5 free of rounding drift
        return base / DIVISOR ** decays_passed(iteration, self.total_steps, self.milestones)

    def is_frozen(self, name: str) -> bool:
        return name in self.frozen or name.split(".", 1)[0] in self.frozen


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], iteration: int | None = None) -> None:
    """In-place bias-corrected Adam update of every non-frozen parameter that has a gradient."""
    it = state.step_count if iteration is None else iteration
    for name, g in grads.items():
        if g is None or state.is_frozen(name):
            continue
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[0]
            raise NonFiniteGradient(f"non-finite gradient for '{name}' at index {tuple(int(i) for i in bad)}")
    for name, g in grads.items():
        if g is None or state.is_frozen(name):
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for '{name}' has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        t = state.t.get(name, 0) + 1
        state.t[name] = t
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * np.square(g)
        denom = np.sqrt(v)
        denom *= 1.0 / np.sqrt(1 - state.beta2**t)
        denom += state.eps
        step = m / denom
        step *= state.lr_at(it, name) / (1 - state.beta1**t)
        p -= step
    state.step_count = it + 1
