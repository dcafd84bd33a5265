"""Deformable DETR-style BEV decoder with hybrid (learned + proposal) object queries."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import ops
from .autodiff.nn import FeedForward, LayerNorm, Linear, Module, Parameter
from .autodiff.tensor import DiffTensor, as_tensor
from .geometry import Box3D
from .perspective_head import focal_loss_terms
from .spatial_encoder import BEVGrid, BEVGridSpec, _ring_offsets

PER_DATASET = "per_dataset"
PER_IMAGE = "per_image"
REF_EPS = 1e-4
# L1 weights over (x, y, z, log l, log w, log h, sin, cos, vx, vy)
CODE_WEIGHTS = np.array([1, 1, 1, 1, 1, 1, 1, 1, 0.2, 0.2], dtype=float)
N_PARAMS = 10


@dataclass
class DecoderConfig:
    num_queries: int = 300
    num_layers: int = 3
    n_points: int = 4
    num_classes: int = 3
    ffn_hidden: int | None = None
    fourier_freqs: int = 4
    cls_weight: float = 2.0
    l1_weight: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass(eq=False)
class HybridQueries:
    content: DiffTensor  # [Q, C]
    pos: DiffTensor  # [Q, C]
    reference: DiffTensor  # [Q, 2] normalized BEV (x, y)
    origin: np.ndarray  # [Q] tags

    @property
    def num_queries(self) -> int:
        return self.content.shape[0]

    def count(self, tag: str) -> int:
        return int(np.sum(self.origin == tag))


@dataclass(eq=False)
class LayerOutput:
    cls: DiffTensor  # [Q, K] logits
    params: DiffTensor  # [Q, 10] metric box parameters
    reference: np.ndarray  # [Q, 2] refined, normalized


def inverse_sigmoid(x, eps: float = REF_EPS):
    if isinstance(x, DiffTensor):
        x = ops.where((x.data < eps), eps, ops.where(x.data > 1 - eps, 1 - eps, x))
        return ops.log(x) - ops.log(1.0 - x)
    x = np.clip(x, eps, 1 - eps)
    return np.log(x) - np.log1p(-x)


def fourier_embed(ref: np.ndarray, n_freqs: int) -> np.ndarray:
    """[Q,2] in [0,1] -> [Q, 4*n_freqs] of sin/cos at octave frequencies."""
    f = np.pi * 2.0 ** np.arange(n_freqs)
    ang = ref[:, :, None] * f  # [Q,2,F]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(len(ref), -1)


def normalized_centers(centers_xy: np.ndarray, spec: BEVGridSpec) -> np.ndarray:
    ref = spec.normalize(np.asarray(centers_xy, dtype=float).reshape(-1, 2))
    return np.clip(ref, REF_EPS, 1 - REF_EPS)


def build_hybrid_queries(proposal_centers, learned_content, learned_pos_embed, ref_linear: Linear,
                         image_content, pos_mlp, spec: BEVGridSpec, n_freqs: int) -> HybridQueries:
    """Per-dataset queries followed by one per-image query per proposal centre."""
    content = as_tensor(learned_content)
    pos = as_tensor(learned_pos_embed)
    ref = ops.sigmoid(ref_linear(pos))
    origin = np.full(content.shape[0], PER_DATASET, dtype=object)
    centers = np.asarray(proposal_centers, dtype=float).reshape(-1, 2)
    if len(centers) == 0:
        return HybridQueries(content, pos, ref, origin)
    img_ref = normalized_centers(centers, spec).astype(content.dtype)
    img_pos = pos_mlp(DiffTensor(fourier_embed(img_ref, n_freqs).astype(content.dtype)))
    img_content = ops.reshape(image_content, (1, -1)) * np.ones((len(centers), 1), dtype=content.dtype)
    return HybridQueries(ops.concat([content, img_content], axis=0), ops.concat([pos, img_pos], axis=0),
                         ops.concat([ref, DiffTensor(img_ref)], axis=0),
                         np.concatenate([origin, np.full(len(centers), PER_IMAGE, dtype=object)]))


class QuerySelfAttention(Module):
    def __init__(self, rng, channels: int):
        self.q = Linear(rng, channels, channels)
        self.k = Linear(rng, channels, channels)
        self.v = Linear(rng, channels, channels)
        self.out = Linear(rng, channels, channels)
        self.scale = 1.0 / np.sqrt(channels)

    def __call__(self, x, pos):
        qk = x + pos
        logits = ops.matmul(self.q(qk), self.k(qk).T) * self.scale
        return self.out(ops.matmul(ops.softmax(logits, axis=-1), self.v(x)))


class BEVCrossAttention(Module):
    """Deformable sampling of the BEV map around each query's reference point."""

    def __init__(self, rng, channels: int, n_points: int):
        self.n_points = n_points
        self.offsets = Linear(rng, channels, n_points * 2, scale=0.0)
        self.offsets.bias.data[:] = _ring_offsets(1, n_points)
        self.attn = Linear(rng, channels, n_points, scale=0.0)
        self.value = Linear(rng, channels, channels)
        self.out = Linear(rng, channels, channels)

    def value_map(self, bev: DiffTensor) -> DiffTensor:
        C, H, W = bev.shape
        v = self.value(bev.reshape((C, H * W)).T)
        return v.T.reshape((C, H, W))

    def __call__(self, x, pos, reference, value_map):
        Q, P = x.shape[0], self.n_points
        _, H, W = value_map.shape
        qp = x + pos
        scale = np.array([W, H], dtype=x.dtype)
        base = reference * scale - 0.5  # normalized -> grid (column, row)
        pts = self.offsets(qp).reshape((Q, P, 2)) + ops.reshape(base, (Q, 1, 2))
        sampled = ops.bilinear_sample(value_map, pts.reshape((Q * P, 2)))
        w = ops.softmax(self.attn(qp), axis=-1).reshape((Q, P, 1))
        return self.out((sampled.T.reshape((Q, P, -1)) * w).sum(axis=1))


class DecoderLayer(Module):
    def __init__(self, rng, channels: int, cfg: DecoderConfig):
        self.self_attn = QuerySelfAttention(rng, channels)
        self.cross_attn = BEVCrossAttention(rng, channels, cfg.n_points)
        self.ffn = FeedForward(rng, channels, cfg.ffn_hidden or 2 * channels)
        self.norms = [LayerNorm(channels) for _ in range(3)]

    def __call__(self, x, pos, reference, bev_features):
        x = self.norms[0](x + self.self_attn(x, pos))
        x = self.norms[1](x + self.cross_attn(x, pos, reference, self.cross_attn.value_map(bev_features)))
        return self.norms[2](x + self.ffn(x))


def decoder_layer(layer: DecoderLayer, queries: HybridQueries, bev: BEVGrid) -> HybridQueries:
    """One layer without a box head; reference points are carried unchanged."""
    content = layer(queries.content, queries.pos, queries.reference, as_tensor(bev.features))
    return HybridQueries(content, queries.pos, queries.reference, queries.origin)


class BoxHead(Module):
    def __init__(self, rng, channels: int, num_classes: int):
        self.cls = Linear(rng, channels, num_classes)
        self.cls.bias.data[:] = -4.6  # prior probability ~0.01
        self.reg1 = Linear(rng, channels, channels)
        self.reg2 = Linear(rng, channels, N_PARAMS, scale=0.01)
        self.reg2.bias.data[:] = [0, 0, 0.75, np.log(4.0), np.log(1.8), np.log(1.5), 0, 1, 0, 0]

    def __call__(self, x, reference, spec: BEVGridSpec):
        cls = self.cls(x)
        reg = self.reg2(self.reg1(x).relu())
        xy = ops.sigmoid(inverse_sigmoid(reference) + reg[:, 0:2])
        lo = np.array([spec.x_range[0], spec.y_range[0]], dtype=x.dtype)
        span = np.array([spec.x_range[1] - spec.x_range[0], spec.y_range[1] - spec.y_range[0]], dtype=x.dtype)
        params = ops.concat([xy * span + lo, reg[:, 2:]], axis=1)
        return cls, params, xy.data.copy()


class BEVDecoder(Module):
    def __init__(self, rng, channels: int, spec: BEVGridSpec, cfg: DecoderConfig = DecoderConfig()):
        self.cfg = cfg
        self.spec = spec
        Q = cfg.num_queries
        self.query_content = Parameter(rng.normal(0.0, 1.0, size=(Q, channels)))
        self.pos_embed = Parameter(rng.normal(0.0, 1.0, size=(Q, channels)))
        self.ref_linear = Linear(rng, channels, 2)
        self.image_content = Parameter(rng.normal(0.0, 1.0, size=channels))
        self.pos_mlp = [Linear(rng, 4 * cfg.fourier_freqs, channels), Linear(rng, channels, channels)]
        self.layers = [DecoderLayer(rng, channels, cfg) for _ in range(cfg.num_layers)]
        self.heads = [BoxHead(rng, channels, cfg.num_classes) for _ in range(cfg.num_layers)]

    def _pos_mlp(self, x):
        return self.pos_mlp[1](self.pos_mlp[0](x).relu())

    def build_queries(self, proposal_centers=()) -> HybridQueries:
        return build_hybrid_queries(proposal_centers, self.query_content, self.pos_embed, self.ref_linear,
                                    self.image_content, self._pos_mlp, self.spec, self.cfg.fourier_freqs)

    def __call__(self, bev: BEVGrid, proposal_centers=()) -> list[LayerOutput]:
        return self.decode(self.build_queries(proposal_centers), bev)

    def decode(self, queries: HybridQueries, bev: BEVGrid) -> list[LayerOutput]:
        x, pos, ref = queries.content, queries.pos, queries.reference
        feats = as_tensor(bev.features)
        outs = []
        for layer, head in zip(self.layers, self.heads):
            x = layer(x, pos, ref, feats)
            cls, params, new_ref = head(x, ref, self.spec)
            outs.append(LayerOutput(cls, params, new_ref))
            ref = DiffTensor(new_ref)  # refinement is not back-propagated across layers
        return outs


# -- targets, matching and loss ------------------------------------------------------

def box_to_params(b: Box3D) -> np.ndarray:
    return np.array([b.center[0], b.center[1], b.center[2], *np.log(b.size),
                     np.sin(b.yaw), np.cos(b.yaw), b.velocity[0], b.velocity[1]])


def params_to_box(p: np.ndarray, class_id: int = 0, score: float = 1.0) -> Box3D:
    return Box3D(center=p[0:3], size=np.exp(np.clip(p[3:6], -5, 5)), yaw=float(np.arctan2(p[6], p[7])),
                 velocity=p[8:10], class_id=class_id, score=score)


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def match_cost(cls_logits: np.ndarray, params: np.ndarray, gt_labels: np.ndarray, gt_params: np.ndarray,
               cfg: DecoderConfig = DecoderConfig()) -> np.ndarray:
    """[Q, G] matching cost: weighted focal class cost plus weighted L1 box cost."""
    p = _sigmoid_np(cls_logits[:, gt_labels])
    a, g = cfg.focal_alpha, cfg.focal_gamma
    pos = a * (1 - p) ** g * -np.log(p + 1e-12)
    neg = (1 - a) * p ** g * -np.log(1 - p + 1e-12)
    l1 = (np.abs(params[:, None, :] - gt_params[None, :, :]) * CODE_WEIGHTS).sum(axis=2)
    return cfg.cls_weight * (pos - neg) + cfg.l1_weight * l1


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if cost.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    rows, cols = linear_sum_assignment(cost)
    return rows, cols


def brute_force_assignment(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive minimum-cost matching of every column to a distinct row (small inputs only)."""
    Q, G = cost.shape
    best, best_rows = np.inf, None
    for rows in itertools.permutations(range(Q), G):
        c = cost[list(rows), range(G)].sum()
        if c < best:
            best, best_rows = c, rows
    rows = np.asarray(best_rows, dtype=int)
    order = np.argsort(rows)
    return rows[order], np.arange(G)[order]


def layer_loss(out: LayerOutput, gt_boxes, cfg: DecoderConfig):
    cls, params = out.cls, out.params
    gt_labels = np.array([b.class_id for b in gt_boxes], dtype=int)
    gt_params = np.array([box_to_params(b) for b in gt_boxes]).reshape(-1, N_PARAMS)
    rows, cols = hungarian(match_cost(cls.data, params.data, gt_labels, gt_params, cfg))
    targets = np.zeros(cls.shape)
    targets[rows, gt_labels[cols]] = 1.0
    norm = max(1.0, float(len(gt_boxes)))
    l_cls = focal_loss_terms(cls, targets, cfg.focal_alpha, cfg.focal_gamma).sum() * (1.0 / norm)
    if len(rows):
        diff = ops.take_rows(params, rows) - gt_params[cols].astype(params.dtype)
        l_reg = (ops.abs(diff) * CODE_WEIGHTS.astype(params.dtype)).sum() * (1.0 / norm)
    else:
        l_reg = DiffTensor(np.zeros((), dtype=params.dtype))
    return l_cls, l_reg, (rows, cols)


def bev_loss(outputs: list[LayerOutput], gt_boxes, cfg: DecoderConfig = DecoderConfig()):
    """Mean over decoder layers of cls_weight*focal + l1_weight*L1; returns (loss, parts)."""
    total, cls_sum, reg_sum = None, 0.0, 0.0
    for out in outputs:
        l_cls, l_reg, _ = layer_loss(out, gt_boxes, cfg)
        term = l_cls * cfg.cls_weight + l_reg * cfg.l1_weight
        total = term if total is None else total + term
        cls_sum += float(l_cls.data)
        reg_sum += float(l_reg.data)
    n = len(outputs)
    loss = total * (1.0 / n)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite value in L_bev")
    return loss, {"cls": cls_sum / n, "reg": reg_sum / n}


def total_loss(l_bev, l_pers, lambda_bev: float = 1.0, lambda_pers: float = 1.0):
    return l_bev * lambda_bev + l_pers * lambda_pers


# -- detections ---------------------------------------------------------------------

def decode_detections(out: LayerOutput, score_thresh: float = 0.05, max_det: int = 100) -> list[Box3D]:
    probs = _sigmoid_np(out.cls.data.astype(float))
    cls = probs.argmax(axis=1)
    score = probs.max(axis=1)
    order = np.argsort(-score, kind="stable")[:max_det]
    params = out.params.data.astype(float)
    return [params_to_box(params[i], int(cls[i]), float(score[i])) for i in order if score[i] >= score_thresh]


def dump_detections(frames_dets, path) -> None:
    """``frames_dets`` is a list of (frame key, list of Box3D)."""
    rec = [{"frame": key, "detections": [b.to_dict() for b in dets]} for key, dets in frames_dets]
    Path(path).write_text(json.dumps(rec, indent=1))
