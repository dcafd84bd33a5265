"""AdamW with decoupled weight decay, plus gradient-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamWHyper:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params, grads, state: AdamWState, hyper: AdamWHyper, names=None) -> AdamWState:
    """Update ``params`` in place.

    ``grads[i]`` may be None for a parameter that received no gradient; it is
    then treated as zero (weight decay still applies).
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state has one slot per parameter")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            who = names[i] if names else f"#{i}"
            raise NonFiniteGradientError(f"non-finite gradient in parameter {who}")
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if hyper.weight_decay:
            p.data *= 1.0 - hyper.lr * hyper.weight_decay
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return state


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads if g is not None)))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= s
    return total


class AdamW:
    def __init__(self, params, hyper: AdamWHyper | None = None, names=None):
        self.params = list(params)
        self.names = names
        self.hyper = hyper or AdamWHyper()
        self.state = AdamWState()

    def step(self):
        optimizer_step(self.params, [p.grad for p in self.params], self.state, self.hyper, self.names)
