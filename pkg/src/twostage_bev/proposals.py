"""Post-processing of per-view perspective proposals into BEV reference centres.

Stages: per-view 2D NMS, per-view top-k1, BEV NMS over the union, global top-k2.
Equal scores are ordered by (view, index) everywhere so outputs are deterministic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box3D, CameraRig, box_corners_3d, box_image_rect, iou_bev, se3_apply

PERS_NMS_IOU = 0.75
BEV_NMS_IOU = 0.3
K1 = 100
K2 = 100


@dataclass(eq=False)
class Proposal:
    box: Box3D  # ego frame
    score: float
    view: int
    index: int  # position in the view's raw proposal list
    rect: tuple | None = None  # image-plane hull in its source view

    def key(self):
        return (-self.score, self.view, self.index)


@dataclass(eq=False)
class ProposalSet:
    proposals: list = field(default_factory=list)

    @property
    def boxes(self) -> list:
        return [(p.box, p.score, p.view) for p in self.proposals]

    @property
    def bev_centers(self) -> np.ndarray:
        if not self.proposals:
            return np.zeros((0, 2))
        return np.array([p.box.center[:2] for p in self.proposals])

    @property
    def scores(self) -> np.ndarray:
        return np.array([p.score for p in self.proposals])

    def __len__(self):
        return len(self.proposals)


def iou_2d_matrix(rects: np.ndarray) -> np.ndarray:
    r = np.asarray(rects, dtype=float).reshape(-1, 4)
    ix = np.clip(np.minimum(r[:, None, 2], r[None, :, 2]) - np.maximum(r[:, None, 0], r[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(r[:, None, 3], r[None, :, 3]) - np.maximum(r[:, None, 1], r[None, :, 1]), 0, None)
    inter = ix * iy
    area = np.clip(r[:, 2] - r[:, 0], 0, None) * np.clip(r[:, 3] - r[:, 1], 0, None)
    union = area[:, None] + area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _greedy(order, suppresses) -> list[int]:
    """Greedy NMS over ``order``; ``suppresses(kept, rest)`` flags rest items to drop."""
    alive = list(order)
    kept = []
    while alive:
        head = alive.pop(0)
        kept.append(head)
        if alive:
            drop = suppresses(head, alive)
            alive = [a for a, d in zip(alive, drop) if not d]
    return kept


def nms_pers(rects, scores, iou_thresh: float = PERS_NMS_IOU) -> list[int]:
    """Indices kept by greedy 2D NMS, in score-descending order (ties by index)."""
    scores = np.asarray(scores, dtype=float)
    if len(scores) == 0:
        return []
    iou = iou_2d_matrix(rects)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return _greedy(order, lambda h, rest: iou[h, rest] > iou_thresh)


def gather_topk1(per_view, k1: int = K1) -> list[Proposal]:
    """Union of every view's top-k1 survivors, sorted by (score desc, view, index)."""
    out = []
    for props in per_view:
        out.extend(sorted(props, key=Proposal.key)[:k1])
    return sorted(out, key=Proposal.key)


def _bev_radius(b: Box3D) -> float:
    return 0.5 * float(np.hypot(b.size[0], b.size[1]))


def nms_bev(boxes, scores, iou_thresh: float = BEV_NMS_IOU, order=None) -> list[int]:
    if len(boxes) == 0:
        return []
    scores = np.asarray(scores, dtype=float)
    if order is None:
        order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    centers = np.array([b.center[:2] for b in boxes])
    radius = np.array([_bev_radius(b) for b in boxes])

    def suppresses(h, rest):
        rest = np.asarray(rest)
        near = np.linalg.norm(centers[rest] - centers[h], axis=1) < radius[rest] + radius[h]
        return [bool(n) and iou_bev(boxes[h], boxes[r]) > iou_thresh for r, n in zip(rest, near)]

    return _greedy(order, suppresses)


def nms_bev_then_topk2(candidates, bev_iou_thresh: float = BEV_NMS_IOU, k2: int = K2) -> ProposalSet:
    cands = sorted(candidates, key=Proposal.key)
    kept = nms_bev([p.box for p in cands], [p.score for p in cands], bev_iou_thresh,
                   order=list(range(len(cands))))
    return ProposalSet([cands[i] for i in kept[:k2]])


def view_rects(boxes, rig: CameraRig, view: int) -> list:
    K, T = rig.view(view)
    rects = []
    for b in boxes:
        r = box_image_rect(se3_apply(T, box_corners_3d(b)), K)
        rects.append(r if r is not None else (0.0, 0.0, 0.0, 0.0))
    return rects


@dataclass
class PipelineConfig:
    pers_nms_iou: float = PERS_NMS_IOU
    bev_nms_iou: float = BEV_NMS_IOU
    k1: int = K1
    k2: int = K2


@dataclass
class PipelineTrace:
    """Survival flags per stage for the debug dump."""

    proposals: list
    after_pers_nms: set
    after_topk1: set
    after_bev: set

    def to_json(self) -> list:
        out = []
        for p in self.proposals:
            k = (p.view, p.index)
            out.append({"view": p.view, "index": p.index, "score": p.score, "box": p.box.to_dict(),
                        "rect": list(p.rect) if p.rect is not None else None,
                        "survived": {"pers_nms": k in self.after_pers_nms, "topk1": k in self.after_topk1,
                                     "bev_nms_topk2": k in self.after_bev}})
        return out

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def run_pipeline(view_proposals, rig: CameraRig, cfg: PipelineConfig = PipelineConfig(),
                 trace: bool = False):
    """``view_proposals[i]`` is a list of (ego-frame Box3D, score) from view i."""
    per_view, everything = [], []
    for v, props in enumerate(view_proposals):
        boxes = [b for b, _ in props]
        rects = view_rects(boxes, rig, v)
        items = [Proposal(b, float(s), v, i, tuple(r)) for i, ((b, s), r) in enumerate(zip(props, rects))]
        everything.extend(items)
        keep = nms_pers(rects, [p.score for p in items], cfg.pers_nms_iou)
        per_view.append([items[i] for i in keep])
    pool = gather_topk1(per_view, cfg.k1)
    result = nms_bev_then_topk2(pool, cfg.bev_nms_iou, cfg.k2)
    if not trace:
        return result
    keys = lambda ps: {(p.view, p.index) for p in ps}  # noqa: E731
    return result, PipelineTrace(everything, keys(p for v in per_view for p in v), keys(pool),
                                 keys(result.proposals))
