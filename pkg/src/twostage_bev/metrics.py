"""Centre-distance detection metrics: per-class AP, true-positive errors and NDS."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box3D, iou_3d_aligned, normalize_angle

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
RECALL_BINS = 101
TP_NAMES = ("mATE", "mASE", "mAOE", "mAVE", "mAAE")


@dataclass
class MatchResult:
    """Predictions in descending score order with their match outcome."""

    scores: np.ndarray
    is_tp: np.ndarray
    pairs: list  # (pred flat index, frame, gt index, distance)
    unmatched_pred: list
    unmatched_gt: list  # (frame, gt index)
    num_gt: int
    predictions: list  # (frame, index in frame, Box3D) in the order above


def planar_distance(a: Box3D, b: Box3D) -> float:
    return float(np.hypot(*(a.center[:2] - b.center[:2])))


def match(predictions, gt, threshold_m: float, class_id: int | None = None) -> MatchResult:
    """Greedy score-descending one-to-one matching over frames.

    ``predictions`` and ``gt`` are per-frame lists of Box3D.  Each prediction
    takes the nearest unmatched same-class gt of its frame within the threshold.
    """
    keep = (lambda b: True) if class_id is None else (lambda b: b.class_id == class_id)
    flat = [(f, i, b) for f, boxes in enumerate(predictions) for i, b in enumerate(boxes) if keep(b)]
    flat.sort(key=lambda t: -t[2].score)  # stable: input order breaks ties
    gts = [[(j, g) for j, g in enumerate(frame) if keep(g)] for frame in gt]
    used = [set() for _ in gt]
    num_gt = sum(len(g) for g in gts)
    is_tp = np.zeros(len(flat), dtype=bool)
    pairs, unmatched = [], []
    for k, (f, i, b) in enumerate(flat):
        best, best_d = None, np.inf
        for j, g in gts[f]:
            if j in used[f] or g.class_id != b.class_id:
                continue
            d = planar_distance(b, g)
            if d < best_d:
                best, best_d = j, d
        if best is not None and best_d <= threshold_m:
            used[f].add(best)
            is_tp[k] = True
            pairs.append((k, f, best, best_d))
        else:
            unmatched.append(k)
    missed = [(f, j) for f, frame in enumerate(gts) for j, _ in frame if j not in used[f]]
    return MatchResult(np.array([t[2].score for t in flat]), is_tp, pairs, unmatched, missed, num_gt, flat)


def precision_recall(m: MatchResult) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(m.is_tp).astype(float)
    fp = np.cumsum(~m.is_tp).astype(float)
    prec = tp / np.maximum(tp + fp, 1e-12)
    rec = tp / max(m.num_gt, 1)
    return prec, rec


def average_precision(m: MatchResult, min_recall: float = MIN_RECALL,
                      min_precision: float = MIN_PRECISION) -> float:
    """Area under the interpolated PR curve above the recall/precision floor, normalised to [0,1]."""
    if m.num_gt == 0 or len(m.is_tp) == 0:
        return 0.0
    prec, rec = precision_recall(m)
    grid = np.linspace(0.0, 1.0, RECALL_BINS)
    p = np.interp(grid, rec, prec, right=0.0)
    p = p[round(100 * min_recall) + 1:] - min_precision
    p[p < 0] = 0.0
    return float(np.mean(p)) / (1.0 - min_precision)


def yaw_error(a: float, b: float, period: float = 2 * np.pi) -> float:
    d = abs(normalize_angle(a - b))
    if period < 2 * np.pi:
        d = min(d % period, period - d % period)
    return float(d)


def pair_errors(pred: Box3D, gt: Box3D, yaw_period: float = 2 * np.pi) -> dict:
    return {"mATE": planar_distance(pred, gt),
            "mASE": 1.0 - iou_3d_aligned(pred.size, gt.size),
            "mAOE": yaw_error(pred.yaw, gt.yaw, yaw_period),
            "mAVE": float(np.linalg.norm(pred.velocity - gt.velocity)),
            "mAAE": 0.0}  # the simulator has one constant attribute


def tp_errors(pairs) -> dict:
    """Mean of each error over (pred, gt) pairs; 1.0 when there are none."""
    if not pairs:
        return {k: 1.0 for k in TP_NAMES}
    errs = [pair_errors(p, g) for p, g in pairs]
    return {k: float(np.mean([e[k] for e in errs])) for k in TP_NAMES}


def nds(mAP: float, errors: dict) -> float:
    return 0.1 * (5.0 * mAP + sum(1.0 - min(1.0, errors[k]) for k in TP_NAMES))


@dataclass
class MetricsReport:
    summary: dict
    per_class: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"summary": self.summary, "per_class": self.per_class}

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def evaluate(predictions, gt, class_names, thresholds=DIST_THRESHOLDS) -> MetricsReport:
    """Classes with neither gt nor predictions are left out of the means."""
    per_class = {}
    aps, tps = [], []
    for c, name in enumerate(class_names):
        n_gt = sum(b.class_id == c for f in gt for b in f)
        n_pred = sum(b.class_id == c for f in predictions for b in f)
        if n_gt == 0 and n_pred == 0:
            continue
        row = {}
        for t in thresholds:
            m = match(predictions, gt, t, c)
            row[f"AP@{t:g}"] = average_precision(m)
        row["AP"] = float(np.mean([row[f"AP@{t:g}"] for t in thresholds]))
        m = match(predictions, gt, TP_THRESHOLD, c)
        pairs = [(m.predictions[k][2], gt[f][j]) for k, f, j, _ in m.pairs]
        errs = tp_errors(pairs)
        row.update(errs)
        per_class[name] = row
        aps.append(row["AP"])
        tps.append(errs)
    mAP = float(np.mean(aps)) if aps else 0.0
    errors = {k: float(np.mean([e[k] for e in tps])) if tps else 1.0 for k in TP_NAMES}
    summary = {"NDS": nds(mAP, errors), "mAP": mAP, **errors}
    for t in thresholds:
        vals = [row[f"AP@{t:g}"] for row in per_class.values()]
        summary[f"mAP@{t:g}"] = float(np.mean(vals)) if vals else 0.0
    return MetricsReport(summary, per_class)
