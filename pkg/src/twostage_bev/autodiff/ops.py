"""Differentiable primitives over :class:`DiffTensor`."""
from __future__ import annotations

import numpy as np

from .tensor import DiffTensor, DimensionError, as_tensor, make_result  # noqa: F401

ELEMENTWISE_KINDS = ("add", "sub", "mul", "div", "exp", "log", "relu",
                     "sigmoid", "tanh", "neg", "pow")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, b):
    a_t = isinstance(a, DiffTensor)
    b_t = isinstance(b, DiffTensor)
    if a_t and not b_t:
        b = DiffTensor(b, dtype=a.dtype)
    elif b_t and not a_t:
        a = DiffTensor(a, dtype=b.dtype)
    elif not a_t and not b_t:
        a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


# -- binary elementwise -------------------------------------------------

def add(a, b) -> DiffTensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> DiffTensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> DiffTensor:
    a, b = _coerce(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> DiffTensor:
    a, b = _coerce(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def pow(a, p) -> DiffTensor:
    if isinstance(p, DiffTensor):
        a, p = _coerce(a, p)
        out = a.data ** p.data

        def backward(g):
            ga = _unbroadcast(g * p.data * a.data ** (p.data - 1), a.shape) if a.requires_grad else None
            gp = _unbroadcast(g * out * np.log(a.data), p.shape) if p.requires_grad else None
            return ga, gp

        return make_result(out, (a, p), backward, "pow")
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return make_result(out, (a,), backward, "pow")


def minimum(a, b) -> DiffTensor:
    a, b = _coerce(a, b)
    take_a = a.data <= b.data

    def backward(g):
        return (_unbroadcast(np.where(take_a, g, 0.0), a.shape),
                _unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return make_result(np.minimum(a.data, b.data), (a, b), backward, "minimum")


def maximum(a, b) -> DiffTensor:
    a, b = _coerce(a, b)
    take_a = a.data >= b.data

    def backward(g):
        return (_unbroadcast(np.where(take_a, g, 0.0), a.shape),
                _unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return make_result(np.maximum(a.data, b.data), (a, b), backward, "maximum")


def where(cond, a, b) -> DiffTensor:
    a, b = _coerce(a, b)
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return make_result(np.where(cond, a.data, b.data), (a, b), backward, "where")


# -- unary elementwise --------------------------------------------------

def neg(a) -> DiffTensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> DiffTensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> DiffTensor:
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> DiffTensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0).astype(a.dtype), (a,),
                       lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> DiffTensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a) -> DiffTensor:
    """``log(sigmoid(a))`` without overflow for large negative inputs."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid_np(x)
    return make_result(out.astype(a.dtype), (a,), lambda g: (g * (1.0 - s),), "log_sigmoid")


def tanh(a) -> DiffTensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def abs(a) -> DiffTensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return make_result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def elementwise(op_kind: str, a, b=None) -> DiffTensor:
    """Dispatch one of the named elementwise kinds."""
    if op_kind not in ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    fn = globals()[op_kind]
    if op_kind in ("add", "sub", "mul", "div", "pow"):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn(a, b)
    return fn(a)


# -- linear algebra -----------------------------------------------------

def matmul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def softmax(a, axis: int = -1) -> DiffTensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise IndexError(f"axis {axis} out of range for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


# -- reductions and shape ops --------------------------------------------

def reduce(op: str, a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)
    if op == "sum":
        out = a.data.sum(axis=axis, keepdims=keepdims)
    elif op == "mean":
        out = a.data.mean(axis=axis, keepdims=keepdims)
    elif op == "max":
        out = a.data.max(axis=axis, keepdims=keepdims)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    out = np.asarray(out, dtype=a.dtype)

    def expand(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return g

    def backward(g):
        g = expand(g)
        if op == "sum":
            return (np.broadcast_to(g, a.shape).copy(),)
        if op == "mean":
            n = a.size // max(out.size, 1)
            return (np.broadcast_to(g / n, a.shape).copy(),)
        m = expand(out)
        hit = a.data == m
        return (hit * g / hit.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), backward, f"reduce_{op}")


def sum(a, axis=None, keepdims=False) -> DiffTensor:  # noqa: A001
    return reduce("sum", a, axis, keepdims)


def mean(a, axis=None, keepdims=False) -> DiffTensor:
    return reduce("mean", a, axis, keepdims)


def reshape(a, shape) -> DiffTensor:
    a = as_tensor(a)
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> DiffTensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> DiffTensor:
    a = as_tensor(a)
    if isinstance(idx, DiffTensor):
        idx = idx.data.astype(np.intp)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(out, copy=True), (a,), backward, "getitem")


def take_rows(a, rows) -> DiffTensor:
    """Gather along axis 0 with an integer index array (faster scatter than getitem)."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    out = a.data[rows]

    def backward(g):
        return (segment_sum_np(g, rows, a.shape[0]),)

    return make_result(out, (a,), backward, "take_rows")


def segment_sum_np(values: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    flat = values.reshape(values.shape[0], -1)
    out = np.zeros((n, flat.shape[1]), dtype=values.dtype)
    if len(ids):
        order = np.argsort(ids, kind="stable")
        sids = ids[order]
        starts = np.flatnonzero(np.r_[True, sids[1:] != sids[:-1]])
        out[sids[starts]] = np.add.reduceat(flat[order], starts, axis=0)
    return out.reshape((n,) + values.shape[1:])


def segment_sum(values, segment_ids, num_segments: int) -> DiffTensor:
    """Sum rows of ``values`` into ``num_segments`` buckets given per-row ids."""
    values = as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.intp)
    out = segment_sum_np(values.data, ids, num_segments)
    return make_result(out, (values,), lambda g: (g[ids],), "segment_sum")


def concat(tensors, axis: int = 0) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tuple(tensors), backward, "concat")


def stack(tensors, axis: int = 0) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tuple(tensors), backward, "stack")


def pad2d(a, pad: int) -> DiffTensor:
    a = as_tensor(a)
    if pad == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, width)
    return make_result(out, (a,), lambda g: (g[..., pad:-pad, pad:-pad],), "pad2d")


def upsample_nearest2x(a) -> DiffTensor:
    a = as_tensor(a)
    out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return make_result(out, (a,), backward, "upsample")


# -- convolution --------------------------------------------------------

def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> DiffTensor:
    """2D cross-correlation.  ``x`` is [C,H,W] or [B,C,H,W]; kernel [O,C,kh,kw]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [B,C,H,W] and [O,C,kh,kw], got {x.shape}, {kernel.shape}")
    B, C, H, W = xd.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {Ck}")
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Hp, Wp = xd.shape[2], xd.shape[3]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = kernel.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, O)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dx = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if pad:
                dx = dx[:, :, pad:-pad, pad:-pad]
            gx = dx[0] if squeeze else dx
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return make_result(out, inputs, backward, "conv2d")


# -- sampling -----------------------------------------------------------

def bilinear_sample(feature, points, padding_mode: str = "zeros") -> DiffTensor:
    """Sample ``feature`` [C,H,W] at continuous pixel coordinates.

    ``points`` is [P,2] holding (x, y) = (column, row); integer coordinates
    hit pixel centres exactly.  Returns [C,P].
    """
    feature, points = as_tensor(feature), as_tensor(points)
    if padding_mode not in ("zeros", "border"):
        raise ValueError(f"unknown padding mode {padding_mode!r}")
    C, H, W = feature.shape
    px = points.data[:, 0]
    py = points.data[:, 1]
    if padding_mode == "border":
        in_x = (px >= 0) & (px <= W - 1)
        in_y = (py >= 0) & (py <= H - 1)
        px = np.clip(px, 0, W - 1)
        py = np.clip(py, 0, H - 1)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    x1 = x0 + 1
    y1 = y0 + 1
    flat = feature.data.reshape(C, H * W)

    corners = []
    for cy, cx, wgt_y, wgt_x in ((y0, x0, 1 - fy, 1 - fx), (y0, x1, 1 - fy, fx),
                                 (y1, x0, fy, 1 - fx), (y1, x1, fy, fx)):
        ok = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        lin = np.where(ok, cy * W + cx, 0)
        vals = flat[:, lin] * ok
        corners.append((lin, ok, vals, wgt_y, wgt_x))
    (l00, m00, v00, *_), (l01, m01, v01, *_), (l10, m10, v10, *_), (l11, m11, v11, *_) = corners
    out = (v00 * ((1 - fy) * (1 - fx)) + v01 * ((1 - fy) * fx)
           + v10 * (fy * (1 - fx)) + v11 * (fy * fx))

    def backward(g):
        gf = gp = None
        if feature.requires_grad:
            gflat = np.zeros((C, H * W), dtype=g.dtype)
            lins = []
            wts = []
            for lin, ok, _, wy, wx in corners:
                lins.append(np.where(ok, lin, H * W))
                wts.append(wy * wx)
            lin_all = np.concatenate(lins)
            w_all = np.concatenate(wts)
            contrib = np.concatenate([g] * 4, axis=1) * w_all
            order = np.argsort(lin_all, kind="stable")
            sl = lin_all[order]
            starts = np.flatnonzero(np.r_[True, sl[1:] != sl[:-1]])
            sums = np.add.reduceat(contrib[:, order], starts, axis=1)
            keys = sl[starts]
            keep = keys < H * W
            gflat[:, keys[keep]] = sums[:, keep]
            gf = gflat.reshape(C, H, W)
        if points.requires_grad:
            dx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy)
            dy = ((v10 - v00) * (1 - fx) + (v11 - v01) * fx)
            gx = (g * dx).sum(axis=0)
            gy = (g * dy).sum(axis=0)
            if padding_mode == "border":
                gx = gx * in_x
                gy = gy * in_y
            gp = np.stack([gx, gy], axis=1)
        return gf, gp

    return make_result(out.astype(feature.dtype), (feature, points), backward, "bilinear_sample")
