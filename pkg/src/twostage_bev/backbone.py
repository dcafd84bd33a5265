"""Three-stage residual conv backbone with a five-level feature pyramid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Module
from .autodiff.tensor import DiffTensor, as_tensor

STRIDES = (8, 16, 32, 64, 128)
BEV_LEVELS = 4  # the BEV head reads the first four levels
IMAGE_MEAN = 0.4
IMAGE_STD = 0.25


class ConfigurationError(ValueError):
    pass


@dataclass
class FeaturePyramid:
    """Per-level maps batched over views: each tensor is [N, C, H/s, W/s]."""

    strides: tuple
    levels: list

    def level(self, i: int) -> DiffTensor:
        return self.levels[i]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    def shapes(self) -> list[tuple]:
        return [tuple(t.shape[-2:]) for t in self.levels]


class ResidualBlock(Module):
    def __init__(self, rng, width: int):
        self.conv1 = Conv2d(rng, width, width, 3)
        self.conv2 = Conv2d(rng, width, width, 3)
        self.conv2.weight.data *= 0.5

    def __call__(self, x):
        return (x + self.conv2(self.conv1(x).relu())).relu()


class Backbone(Module):
    def __init__(self, rng: np.random.Generator, base_width: int = 32, blocks_per_stage: int = 2,
                 fpn_channels: int = 32):
        w = base_width
        self.stem = [Conv2d(rng, 3, w // 2, 3, stride=2),
                     Conv2d(rng, w // 2, w, 3, stride=2),
                     Conv2d(rng, w, w, 3, stride=2)]
        widths = (w, 2 * w, 4 * w)
        self.down = [None, Conv2d(rng, widths[0], widths[1], 3, stride=2),
                     Conv2d(rng, widths[1], widths[2], 3, stride=2)]
        self.stages = [[ResidualBlock(rng, c) for _ in range(blocks_per_stage)] for c in widths]
        self.lateral = [Conv2d(rng, c, fpn_channels, 1) for c in widths]
        self.smooth = [Conv2d(rng, fpn_channels, fpn_channels, 3) for _ in widths]
        self.extra = [Conv2d(rng, fpn_channels, fpn_channels, 3, stride=2),
                      Conv2d(rng, fpn_channels, fpn_channels, 3, stride=2)]
        self.fpn_channels = fpn_channels

    def extract(self, images) -> FeaturePyramid:
        """``images`` is [3,H,W] or [N,3,H,W] in [0,1]; H and W divisible by 128."""
        x = as_tensor(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        H, W = x.shape[-2:]
        if H % STRIDES[-1] or W % STRIDES[-1]:
            raise ConfigurationError(f"image size {H}x{W} is not divisible by {STRIDES[-1]}")
        x = (x - IMAGE_MEAN) * (1.0 / IMAGE_STD)
        for conv in self.stem:
            x = conv(x).relu()
        feats = []
        for down, blocks in zip(self.down, self.stages):
            if down is not None:
                x = down(x).relu()
            for blk in blocks:
                x = blk(x)
            feats.append(x)
        lat = [lc(f) for lc, f in zip(self.lateral, feats)]
        p5 = lat[2]
        p4 = lat[1] + ops.upsample_nearest2x(p5)
        p3 = lat[0] + ops.upsample_nearest2x(p4)
        outs = [self.smooth[0](p3), self.smooth[1](p4), self.smooth[2](p5)]
        p6 = self.extra[0](outs[2])
        p7 = self.extra[1](p6.relu())
        return FeaturePyramid(STRIDES, outs + [p6, p7])

    __call__ = extract
