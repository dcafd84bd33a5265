"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import DiffTensor


def numeric_grad(fn, inputs: list[DiffTensor], wrt: int, step: float = 1e-5) -> np.ndarray:
    x = inputs[wrt]
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn(*inputs).data.sum())
        flat[i] = orig - step
        down = float(fn(*inputs).data.sum())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor) over elements."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(fn, inputs: list[DiffTensor], step: float = 1e-5, floor: float = 1e-6,
                    weights: np.ndarray | None = None) -> float:
    """Compare analytic and numeric gradients of ``sum(weights * fn(*inputs))``.

    Returns the worst relative error over every input that requires grad.
    """
    if weights is not None:
        w = weights

        def scalar_fn(*xs):
            return (fn(*xs) * w).sum()
    else:
        def scalar_fn(*xs):
            return fn(*xs).sum()

    for t in inputs:
        t.grad = None
    out = scalar_fn(*inputs)
    out.backward()
    worst = 0.0
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(scalar_fn, inputs, k, step)
        worst = max(worst, max_rel_error(analytic, numeric, floor))
    return worst


def check_directional(fn, inputs: list[DiffTensor], seed: int = 0, step: float = 1e-6) -> float:
    """Relative error between grad.v and a central difference along random v.

    ``fn`` returns a scalar tensor.  Cheap enough for large inputs where a
    per-element check is not.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    dirs = [rng.normal(size=t.shape) if t.requires_grad else None for t in inputs]
    analytic = sum(float((t.grad * d).sum()) for t, d in zip(inputs, dirs)
                   if d is not None and t.grad is not None)
    saved = [t.data.copy() for t in inputs]
    for t, d in zip(inputs, dirs):
        if d is not None:
            t.data = t.data + step * d
    up = float(fn(*inputs).data)
    for t, d, s in zip(inputs, dirs, saved):
        if d is not None:
            t.data = s - step * d
    down = float(fn(*inputs).data)
    for t, s in zip(inputs, saved):
        t.data = s
    numeric = (up - down) / (2 * step)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
