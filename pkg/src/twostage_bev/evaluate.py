"""Run a detector over frames, score it and export BEV plots."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .geometry import bev_footprint
from .metrics import MetricsReport, evaluate
from .model import TwoStageDetector
from .scene_sim import CLASS_NAMES, SceneFrame
from .train import history_for


def detect_all(model: TwoStageDetector, sequences: list[list[SceneFrame]]):
    """(predictions, gt) as per-frame lists in sequence order."""
    preds, gt = [], []
    for seq in sequences:
        for i, frame in enumerate(seq):
            preds.append(model.detect(frame, history_for(seq, i, model.cfg)))
            gt.append(list(frame.gt_boxes))
    return preds, gt


def evaluate_model(model: TwoStageDetector, sequences, cfg: ExperimentConfig | None = None) -> MetricsReport:
    cfg = cfg or model.cfg
    preds, gt = detect_all(model, sequences)
    return evaluate(preds, gt, CLASS_NAMES[:cfg.data.num_classes], cfg.eval.thresholds)


def map_at(model: TwoStageDetector, sequences, threshold: float = 1.0) -> float:
    preds, gt = detect_all(model, sequences)
    rep = evaluate(preds, gt, CLASS_NAMES[:model.cfg.data.num_classes], (threshold,))
    return rep.summary[f"mAP@{threshold:g}"]


def plot_bev(frame: SceneFrame, predictions, path, bev_range: float) -> None:
    """Static top-down image: gt footprints in green, predictions in red with scores."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for b in frame.gt_boxes:
        poly = np.vstack([bev_footprint(b), bev_footprint(b)[:1]])
        ax.plot(poly[:, 1], poly[:, 0], color="tab:green", lw=1.5)
    for b in predictions:
        poly = np.vstack([bev_footprint(b), bev_footprint(b)[:1]])
        ax.plot(poly[:, 1], poly[:, 0], color="tab:red", lw=1, alpha=0.4 + 0.6 * float(b.score))
        ax.text(b.center[1], b.center[0], f"{b.score:.2f}", fontsize=6, color="tab:red")
    ax.plot([0], [0], marker="^", color="k")
    ax.set_xlim(bev_range, -bev_range)  # y points left
    ax.set_ylim(-bev_range, bev_range)
    ax.set_aspect("equal")
    ax.set_xlabel("y (m)")
    ax.set_ylabel("x (m)")
    ax.set_title(f"sequence {frame.sequence_id} frame {frame.frame_index}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def run_eval(model: TwoStageDetector, sequences, out_dir, plots: bool | None = None,
             max_plots: int = 8) -> MetricsReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    preds, gt = detect_all(model, sequences)
    report = evaluate(preds, gt, CLASS_NAMES[:cfg.data.num_classes], cfg.eval.thresholds)
    report.dump(out / "metrics.json")
    if cfg.eval.plots if plots is None else plots:
        frames = [f for seq in sequences for f in seq]
        for frame, dets in list(zip(frames, preds))[:max_plots]:
            plot_bev(frame, dets, out / f"bev_s{frame.sequence_id:03d}_f{frame.frame_index:04d}.png",
                     cfg.data.bev_range)
    return report
