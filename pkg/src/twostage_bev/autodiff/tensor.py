"""Dense tensor with reverse-mode gradient recording.

Every operation on a tensor that requires grad records a node holding its
inputs and a backward rule.  ``backward()`` collects the reachable nodes,
orders them into a tape (node ids are issued in creation order, so sorting
by id is a topological order) and replays the rules in reverse.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_local = threading.local()
_node_ids = itertools.count()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def default_dtype():
    return getattr(_local, "dtype", np.float64)


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _local.dtype = dtype.type


@contextmanager
def using_dtype(dtype):
    prev = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Node:
    __slots__ = ("id", "inputs", "backward_fn", "op")

    def __init__(self, inputs, backward_fn, op):
        self.id = next(_node_ids)
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered list of (output tensor, node) pairs reachable from a root."""

    def __init__(self, root: "DiffTensor"):
        seen = set()
        entries = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            entries.append(t)
            stack.extend(t._node.inputs)
        entries.sort(key=lambda t: t._node.id)
        self.entries = entries

    def __len__(self):
        return len(self.entries)

    def is_topological(self) -> bool:
        pos = {id(t): i for i, t in enumerate(self.entries)}
        for i, t in enumerate(self.entries):
            for inp in t._node.inputs:
                if id(inp) in pos and pos[id(inp)] >= i:
                    return False
        return True


class DiffTensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, DiffTensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self):
        return None if self._node is None else self._node.id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data)

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- gradients -----------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if self._node is None:
            _accumulate(self, grad)
            return
        grads = {id(self): grad}
        tape = Tape(self)
        for out in reversed(tape.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            _accumulate(out, g)
            node = out._node
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    _accumulate(inp, ig)
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + ig
                else:
                    grads[id(inp)] = ig

    # -- operators (implemented in ops) --------------------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, p):
        return _ops().pow(self, p)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, idx):
        return _ops().getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return _ops().reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return _ops().reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    @property
    def T(self):
        return _ops().transpose(self, None)

    def exp(self):
        return _ops().exp(self)

    def log(self):
        return _ops().log(self)

    def sigmoid(self):
        return _ops().sigmoid(self)

    def relu(self):
        return _ops().relu(self)

    def tanh(self):
        return _ops().tanh(self)

    def abs(self):
        return _ops().abs(self)


def _accumulate(t: DiffTensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True).reshape(t.shape)
    else:
        t.grad = t.grad + g


def _ops():
    from . import ops

    return ops


def as_tensor(x, dtype=None) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x, dtype=dtype)


def make_result(data: np.ndarray, inputs: Sequence[DiffTensor],
                backward_fn: Callable, op: str) -> DiffTensor:
    """Wrap ``data`` as an op output, recording a node when any input needs grad."""
    out = DiffTensor(data, dtype=data.dtype if isinstance(data, np.ndarray) else None)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(tuple(inputs), backward_fn, op)
    return out
