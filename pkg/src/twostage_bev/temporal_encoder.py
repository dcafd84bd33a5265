"""Warp-concatenate-reduce fusion of BEV grids from other timestamps."""
from __future__ import annotations

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Module
from .autodiff.tensor import DiffTensor, as_tensor
from .geometry import SE3, se3_inverse
from .spatial_encoder import BEVGrid, BEVGridSpec


class SpecMismatchError(ValueError):
    pass


def warp_points(T_k_to_t: SE3, spec: BEVGridSpec) -> np.ndarray:
    """Grid coordinates in frame k of every current-frame cell centre, [H*W, 2]."""
    inv = se3_inverse(T_k_to_t)
    c, s = np.cos(inv.yaw), np.sin(inv.yaw)
    R = np.array([[c, -s], [s, c]])
    xy = spec.cell_centers() @ R.T + inv.translation[:2]
    return spec.to_grid(xy)


def warp_bev(features, T_k_to_t: SE3, spec: BEVGridSpec) -> DiffTensor:
    """Resample a [C,H,W] map from frame k into the current frame (zeros outside)."""
    feat = as_tensor(features.features if isinstance(features, BEVGrid) else features)
    pts = warp_points(T_k_to_t, spec)
    C = feat.shape[0]
    return ops.bilinear_sample(feat, pts).reshape((C, spec.H, spec.W))


class ReductionBlock(Module):
    def __init__(self, rng, channels: int):
        self.conv1 = Conv2d(rng, channels, channels, 3)
        self.conv2 = Conv2d(rng, channels, channels, 3)
        self.conv2.weight.data[:] = 0.0

    def __call__(self, x):
        return x + self.conv2(self.conv1(x).relu())


class TemporalFusion(Module):
    """Concatenate the current grid with ``num_others`` warped grids and reduce to C channels.

    Initialised as a plain average of the inputs: the 1x1 reduction holds
    I/(1+m) blocks and each residual branch ends in a zeroed conv.
    """

    def __init__(self, rng, channels: int, num_others: int, num_blocks: int = 2):
        self.channels = channels
        self.num_others = num_others
        n_in = (1 + num_others) * channels
        self.reduce = Conv2d(rng, n_in, channels, 1)
        self.reduce.weight.data[:] = np.tile(np.eye(channels), (1, 1 + num_others))[:, :, None, None] / (1 + num_others)
        self.reduce.bias.data[:] = 0.0
        self.blocks = [ReductionBlock(rng, channels) for _ in range(num_blocks)]

    def __call__(self, current: BEVGrid, others) -> BEVGrid:
        if len(others) != self.num_others:
            raise ValueError(f"expected {self.num_others} other grids, got {len(others)}")
        maps = [current.features]
        for grid, T in others:
            if grid.spec != current.spec:
                raise SpecMismatchError("BEV grids do not share a grid spec")
            if grid.channels != current.channels:
                raise SpecMismatchError(f"channel mismatch {grid.channels} vs {current.channels}")
            maps.append(warp_bev(grid, T, current.spec))
        x = self.reduce(ops.concat(maps, axis=0))
        for blk in self.blocks:
            x = blk(x)
        return BEVGrid(current.spec, x, current.timestamp, current.ego_pose)


def fuse(fusion: TemporalFusion, current: BEVGrid, others) -> BEVGrid:
    return fusion(current, others)


def select_frames(timestamps, t: float, count: int, interval: float, bidirectional: bool = False) -> list[int]:
    """Indices of the frames nearest to the requested offsets from ``t``.

    Past-only picks t - count*interval ... t - interval (oldest first).
    Bidirectional splits ``count`` evenly: t - i*interval and t + i*interval.
    Targets outside the sequence clamp to the nearest valid frame, so the
    boundary frame is duplicated.
    """
    ts = np.asarray(timestamps, dtype=float)
    if count <= 0:
        return []
    if bidirectional:
        half = count // 2
        past = [t - i * interval for i in range(half, 0, -1)]
        future = [t + i * interval for i in range(1, count - half + 1)]
    else:
        past = [t - i * interval for i in range(count, 0, -1)]
        future = []
    eps = 1e-9
    past_ok = np.flatnonzero(ts <= t + eps)
    future_ok = np.flatnonzero(ts >= t - eps)
    out = []
    for targets, pool in ((past, past_ok), (future, future_ok)):
        for target in targets:
            out.append(int(pool[np.argmin(np.abs(ts[pool] - target))]))
    return out
