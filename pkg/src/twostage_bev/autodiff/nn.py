"""Parameter containers and the handful of layers the detector is built from."""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import DiffTensor, default_dtype


class Parameter(DiffTensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


class Module:
    """Walks attributes for parameters and sub-modules (lists included)."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            yield from _walk(val, prefix + key)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _walk(val, prefix):
    if isinstance(val, Parameter):
        yield prefix, val
    elif isinstance(val, Module):
        yield from val.named_parameters(prefix + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{prefix}.{i}")


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True,
                 scale: float | None = None):
        scale = np.sqrt(1.0 / n_in) if scale is None else scale
        self.weight = Parameter(rng.normal(0.0, scale, size=(n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3,
                 stride: int = 1, pad: int | None = None, bias: bool = True):
        fan_in = c_in * k * k
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


def layer_norm(x, gamma, beta, axis: int = -1, eps: float = 1e-5):
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    return xc / (var + eps) ** 0.5 * gamma + beta


class LayerNorm(Module):
    """Normalises the trailing axis."""

    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x):
        return self.fc2(self.fc1(x).relu())


def channel_linear(x, lin: Linear):
    """Apply ``lin`` over the channel axis of a [C,H,W] map."""
    C, H, W = x.shape
    y = lin(x.reshape(C, H * W).T)
    return y.T.reshape(-1, H, W)
