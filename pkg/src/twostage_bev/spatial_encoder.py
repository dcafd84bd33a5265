"""Lifting multi-view image features onto a BEV grid with spatial cross-attention."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.nn import FeedForward, LayerNorm, Linear, Module, Parameter
from .autodiff.tensor import DiffTensor, as_tensor
from .backbone import BEV_LEVELS, FeaturePyramid
from .geometry import SE3, CameraRig, project_points, se3_apply


@dataclass(frozen=True)
class BEVGridSpec:
    x_range: tuple = (-25.0, 25.0)
    y_range: tuple = (-25.0, 25.0)
    H: int = 50
    W: int = 50
    z_anchors: tuple = (-1.0, 1.0 / 3.0, 5.0 / 3.0, 3.0)

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ValueError("grid needs at least one cell per axis")
        if not self.z_anchors:
            raise ValueError("at least one z anchor is required")
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise ValueError("empty BEV range")

    @property
    def cell_size(self) -> tuple[float, float]:
        return ((self.x_range[1] - self.x_range[0]) / self.W,
                (self.y_range[1] - self.y_range[0]) / self.H)

    @property
    def num_cells(self) -> int:
        return self.H * self.W

    def cell_centers(self) -> np.ndarray:
        """[H*W, 2] (x, y) in row-major cell order; column j runs along x, row i along y."""
        dx, dy = self.cell_size
        xs = self.x_range[0] + (np.arange(self.W) + 0.5) * dx
        ys = self.y_range[0] + (np.arange(self.H) + 0.5) * dy
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def to_grid(self, xy: np.ndarray) -> np.ndarray:
        """Metric (x, y) to continuous (column, row); cell centres are integers."""
        xy = np.asarray(xy, dtype=float)
        dx, dy = self.cell_size
        return np.stack([(xy[..., 0] - self.x_range[0]) / dx - 0.5,
                         (xy[..., 1] - self.y_range[0]) / dy - 0.5], axis=-1)

    def cell_index(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = np.floor(self.to_grid(xy) + 0.5).astype(int)
        return g[..., 1], g[..., 0]

    def normalize(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return np.stack([(xy[..., 0] - self.x_range[0]) / (self.x_range[1] - self.x_range[0]),
                         (xy[..., 1] - self.y_range[0]) / (self.y_range[1] - self.y_range[0])], axis=-1)

    def denormalize(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return np.stack([self.x_range[0] + uv[..., 0] * (self.x_range[1] - self.x_range[0]),
                         self.y_range[0] + uv[..., 1] * (self.y_range[1] - self.y_range[0])], axis=-1)

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range), "H": self.H,
                "W": self.W, "z_anchors": list(self.z_anchors)}


@dataclass(eq=False)
class BEVGrid:
    spec: BEVGridSpec
    features: DiffTensor  # [C, H, W]
    timestamp: float = 0.0
    ego_pose: SE3 = field(default_factory=SE3.identity)

    @property
    def channels(self) -> int:
        return self.features.shape[0]


def reference_points(spec: BEVGridSpec) -> np.ndarray:
    """[H*W*N_z, 3]; index = cell * N_z + anchor."""
    centers = spec.cell_centers()
    nz = len(spec.z_anchors)
    xy = np.repeat(centers, nz, axis=0)
    z = np.tile(np.asarray(spec.z_anchors, dtype=float), spec.num_cells)
    return np.concatenate([xy, z[:, None]], axis=1)


def flat_to_map(x: DiffTensor, spec: BEVGridSpec) -> DiffTensor:
    return x.T.reshape((x.shape[1], spec.H, spec.W))


def map_to_flat(x: DiffTensor) -> DiffTensor:
    C = x.shape[0]
    return x.reshape((C, -1)).T


@dataclass
class CameraHits:
    """Valid (cell, view) projections of the BEV reference points, grouped by view."""

    cell: np.ndarray  # [nh]
    view: np.ndarray  # [nh]
    uv: np.ndarray  # [nh, 2] image pixels
    counts: np.ndarray  # [H*W] hits per cell

    def __len__(self):
        return len(self.cell)


def project_reference_points(spec: BEVGridSpec, rig: CameraRig) -> CameraHits:
    pts = reference_points(spec)
    nz = len(spec.z_anchors)
    cells, views, uvs = [], [], []
    for v in range(rig.num_views):
        K, T = rig.view(v)
        uv, valid = project_points(se3_apply(T, pts), K)
        idx = np.flatnonzero(valid)
        cells.append(idx // nz)
        views.append(np.full(len(idx), v))
        uvs.append(uv[idx])
    cell = np.concatenate(cells).astype(np.intp)
    return CameraHits(cell=cell, view=np.concatenate(views).astype(np.intp),
                      uv=np.concatenate(uvs).reshape(-1, 2),
                      counts=np.bincount(cell, minlength=spec.num_cells))


def _clip(x: DiffTensor, lo: float, hi: float) -> DiffTensor:
    d = x.data
    return ops.where(d < lo, lo, ops.where(d > hi, hi, x))


def _ring_offsets(n_levels: int, n_points: int) -> np.ndarray:
    """Initial sampling pattern: first point at the reference, the rest on a widening spiral."""
    ang = 2 * np.pi * np.arange(n_points) / max(n_points, 1)
    rad = 0.5 * np.arange(n_points)
    ring = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    return np.tile(ring[None], (n_levels, 1, 1)).ravel()


class SpatialCrossAttention(Module):
    def __init__(self, rng, channels: int, n_levels: int = BEV_LEVELS, n_points: int = 4):
        L, P = n_levels, n_points
        self.n_levels, self.n_points = L, P
        self.offsets = Linear(rng, channels, L * P * 2, scale=0.0)
        self.offsets.bias.data[:] = _ring_offsets(L, P)
        self.attn = Linear(rng, channels, L * P, scale=0.0)
        self.value = Linear(rng, channels, channels)
        self.out = Linear(rng, channels, channels)

    def _strip(self, level: DiffTensor) -> DiffTensor:
        """Value-project one level [N,C,h,w] and lay views out as a padded vertical strip [C, N*(h+2), w+2]."""
        N, C, h, w = level.shape
        v = ops.matmul(level.transpose((0, 2, 3, 1)), self.value.weight) + self.value.bias
        v = ops.pad2d(v.transpose((3, 0, 1, 2)), 1)
        return v.reshape((C, N * (h + 2), w + 2))

    def __call__(self, query_flat: DiffTensor, pyramid: FeaturePyramid, hits: CameraHits) -> DiffTensor:
        """``query_flat`` is [H*W, C]; returns the updated [H*W, C] queries."""
        n = len(hits)
        if n == 0:
            return query_flat
        L, P = self.n_levels, self.n_points
        q = ops.take_rows(query_flat, hits.cell)
        off = self.offsets(q).reshape((n, L, P, 2))
        w = ops.softmax(self.attn(q), axis=-1).reshape((n, L * P, 1))
        samples = []
        for lvl in range(L):
            feat = pyramid.levels[lvl]
            _, _, h, wd = feat.shape
            s = pyramid.strides[lvl]
            base = (hits.uv - (s - 1) / 2.0) / s
            pts = off[:, lvl] + base[:, None, :]
            x = _clip(pts[..., 0], -1.0, float(wd)) + 1.0
            y = _clip(pts[..., 1], -1.0, float(h)) + (1.0 + hits.view * (h + 2))[:, None]
            xy = ops.stack([x, y], axis=-1).reshape((n * P, 2))
            sampled = ops.bilinear_sample(self._strip(feat), xy)  # [C, n*P]
            samples.append(sampled.T.reshape((n, P, -1)))
        stacked = ops.concat(samples, axis=1)  # [n, L*P, C]
        per_hit = (stacked * w).sum(axis=1)
        inv = 1.0 / np.maximum(hits.counts, 1)
        agg = ops.segment_sum(per_hit, hits.cell, len(hits.counts)) * inv[:, None].astype(per_hit.dtype)
        mask = (hits.counts > 0)[:, None].astype(per_hit.dtype)
        return query_flat + self.out(agg) * mask


class BEVSelfAttention(Module):
    """Deformable sampling on the BEV plane around each cell's own centre."""

    def __init__(self, rng, channels: int, n_points: int = 4):
        self.n_points = n_points
        self.offsets = Linear(rng, channels, n_points * 2, scale=0.0)
        self.offsets.bias.data[:] = _ring_offsets(1, n_points)
        self.attn = Linear(rng, channels, n_points, scale=0.0)
        self.value = Linear(rng, channels, channels)
        self.out = Linear(rng, channels, channels)

    def __call__(self, query_flat: DiffTensor, spec: BEVGridSpec) -> DiffTensor:
        n, P = spec.num_cells, self.n_points
        value = flat_to_map(self.value(query_flat), spec)
        base = spec.to_grid(spec.cell_centers())
        pts = self.offsets(query_flat).reshape((n, P, 2)) + base[:, None, :]
        sampled = ops.bilinear_sample(value, pts.reshape((n * P, 2)))
        w = ops.softmax(self.attn(query_flat), axis=-1).reshape((n, P, 1))
        return self.out((sampled.T.reshape((n, P, -1)) * w).sum(axis=1))


class EncoderLayer(Module):
    def __init__(self, rng, channels: int, n_levels: int = BEV_LEVELS, n_points: int = 4,
                 ffn_hidden: int | None = None):
        self.self_attn = BEVSelfAttention(rng, channels, n_points)
        self.cross_attn = SpatialCrossAttention(rng, channels, n_levels, n_points)
        self.ffn = FeedForward(rng, channels, ffn_hidden or 2 * channels)
        self.norms = [LayerNorm(channels) for _ in range(3)]

    def __call__(self, q: DiffTensor, pyramid, hits: CameraHits, spec: BEVGridSpec) -> DiffTensor:
        q = self.norms[0](q + self.self_attn(q, spec))
        q = self.norms[1](self.cross_attn(q, pyramid, hits))
        return self.norms[2](q + self.ffn(q))


def spatial_cross_attention(sca: SpatialCrossAttention, bev_queries, pyramid: FeaturePyramid,
                            rig: CameraRig, spec: BEVGridSpec) -> BEVGrid:
    """Single cross-attention pass over a [C,H,W] query map."""
    _check_views(pyramid, rig)
    q = map_to_flat(as_tensor(bev_queries))
    out = sca(q, pyramid, project_reference_points(spec, rig))
    return BEVGrid(spec, flat_to_map(out, spec))


def encoder_stack(layers, initial_queries, pyramid: FeaturePyramid, rig: CameraRig,
                  spec: BEVGridSpec) -> BEVGrid:
    _check_views(pyramid, rig)
    q0 = as_tensor(initial_queries)
    if not layers:
        return BEVGrid(spec, q0)
    hits = project_reference_points(spec, rig)
    q = map_to_flat(q0)
    for layer in layers:
        q = layer(q, pyramid, hits, spec)
    return BEVGrid(spec, flat_to_map(q, spec))


def _check_views(pyramid: FeaturePyramid, rig: CameraRig) -> None:
    if pyramid.levels[0].shape[0] != rig.num_views:
        raise ValueError(f"pyramid has {pyramid.levels[0].shape[0]} views, rig has {rig.num_views}")


class SpatialEncoder(Module):
    """Learned BEV queries refined by a stack of encoder layers."""

    def __init__(self, rng, spec: BEVGridSpec, channels: int, n_layers: int = 3, n_points: int = 4):
        self.spec = spec
        self.queries = Parameter(rng.normal(0.0, 1.0, size=(channels, spec.H, spec.W)))
        self.layers = [EncoderLayer(rng, channels, BEV_LEVELS, n_points) for _ in range(n_layers)]

    def __call__(self, pyramid: FeaturePyramid, rig: CameraRig, timestamp: float = 0.0,
                 ego_pose: SE3 | None = None) -> BEVGrid:
        grid = encoder_stack(self.layers, self.queries, pyramid, rig, self.spec)
        grid.timestamp = timestamp
        grid.ego_pose = ego_pose if ego_pose is not None else SE3.identity()
        return grid
