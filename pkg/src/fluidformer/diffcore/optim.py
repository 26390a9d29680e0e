"""Adam with L2 weight decay and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LR_BASE = 0.01
LR_MILESTONES = (15_000, 25_000, 35_000, 45_000, 50_000, 55_000)


def lr_schedule(iteration: int, base: float = LR_BASE, milestones=LR_MILESTONES) -> float:
    """``base`` halved once for every milestone already reached."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    halvings = sum(1 for m in milestones if iteration >= m)
    return base * 0.5 ** halvings


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.001
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One in-place Adam update.

    Weight decay is added to the gradient as ``weight_decay * theta`` before the
    moment updates; moments are bias corrected.  Parameters without a gradient
    are treated as having a zero gradient.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        theta = p.data if hasattr(p, "data") else p
        g = grads.get(name)
        g = np.zeros_like(theta) if g is None else np.asarray(g, dtype=np.float64)
        if state.weight_decay:
            g = g + state.weight_decay * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
