"""Training loop: AdamW, linear warmup then step decay, gradient clipping, CSV logging."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import load_tensors, save_tensors
from .autodiff.optim import AdamW, AdamWHyper, NonFiniteGradientError, clip_grad_norm
from .config import ExperimentConfig, save_config
from .model import TwoStageDetector
from .scene_sim import SceneFrame, ida_flip
from .temporal_encoder import select_frames

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "L_total", "L_bev", "L_pers", "L_2D", "L_3D", "L_conf", "lr")
CHECKPOINT = "model.ckpt"
LAST_GOOD = "last_good.ckpt"


class TrainingDivergedError(RuntimeError):
    """Raised on a non-finite loss or gradient; the last good checkpoint is kept on disk."""


def lr_at(step: int, cfg: ExperimentConfig) -> float:
    """Linear warmup from 0, then multiply by ``decay_gamma`` at each decay point."""
    t = cfg.train
    if t.warmup_steps and step < t.warmup_steps:
        return t.lr * step / t.warmup_steps
    passed = sum(step >= int(round(f * t.steps)) for f in t.decay_at)
    return t.lr * t.decay_gamma ** passed


def history_for(seq: list[SceneFrame], idx: int, cfg: ExperimentConfig) -> list[SceneFrame]:
    n = cfg.model.num_history
    if n == 0:
        return []
    a = cfg.ablation
    interval = a.long_history_interval if a.long_interval else a.history_interval
    ts = [f.timestamp for f in seq]
    return [seq[i] for i in select_frames(ts, seq[idx].timestamp, n, interval, a.bidirectional)]


@dataclass
class TrainResult:
    model: TwoStageDetector
    rows: list = field(default_factory=list)
    steps_run: int = 0
    stop_reason: str = "budget"
    seconds: float = 0.0


def _write_checkpoint(model: TwoStageDetector, path: Path) -> None:
    save_tensors(path, model.state_dict())


def load_model(cfg: ExperimentConfig, path) -> TwoStageDetector:
    model = TwoStageDetector(cfg)
    model.load_state_dict(load_tensors(path))  # keeps the configured dtype
    return model


def train(cfg: ExperimentConfig, sequences: list[list[SceneFrame]], out_dir=None,
          model: TwoStageDetector | None = None, eval_fn=None) -> TrainResult:
    """Train on every frame of ``sequences``.

    ``eval_fn(model) -> mAP@1m`` is consulted every ``eval_every`` steps when
    ``target_map`` is positive; training stops once it is reached.
    """
    cfg.validate()
    t = cfg.train
    rng = np.random.default_rng(t.seed)
    model = model if model is not None else TwoStageDetector(cfg, np.random.default_rng(t.seed))
    names, params = zip(*model.named_parameters())
    opt = AdamW(params, AdamWHyper(lr=t.lr, weight_decay=t.weight_decay), names=list(names))
    lb, lp = cfg.loss_weights()

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.ini")
        fh = open(out / "losses.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)

    samples = [(s, i) for s, seq in enumerate(sequences) for i in range(len(seq))]
    if not samples:
        raise ValueError("no training frames")
    result = TrainResult(model)
    last_good = model.state_dict()
    recent: list[float] = []
    start = time.perf_counter()
    order: list[int] = []
    try:
        for step in range(t.steps):
            if not order:
                order = list(rng.permutation(len(samples)))
            s, i = samples[order.pop()]
            seq = sequences[s]
            frame = seq[i]
            history = history_for(seq, i, cfg)
            if cfg.ablation.ida:
                flips = rng.random(frame.rig.num_views) < 0.5
                frame = ida_flip(frame, flips)
                history = [ida_flip(h, flips) for h in history]

            lr = lr_at(step, cfg)
            opt.hyper.lr = lr
            model.zero_grad()
            res = model(frame, history)
            loss, parts = model.loss(frame, res)
            if not math.isfinite(parts["L_total"]):
                raise TrainingDivergedError(f"non-finite loss at step {step}")
            loss.backward()
            grads = [p.grad for p in params]
            try:
                clip_grad_norm(grads, t.grad_clip)
                opt.step()
            except NonFiniteGradientError as exc:
                raise TrainingDivergedError(f"step {step}: {exc}") from None
            if lb == 0:
                parts["L_bev"] = 0.0
            if lp == 0:
                parts["L_pers"] = 0.0
            row = {"step": step, **{k: parts[k] for k in CSV_COLUMNS[1:-1]}, "lr": lr}
            result.rows.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in CSV_COLUMNS])
            result.steps_run = step + 1

            if t.checkpoint_every and (step + 1) % t.checkpoint_every == 0:
                last_good = model.state_dict()
                if out is not None:
                    _write_checkpoint(model, out / CHECKPOINT)
            recent.append(parts["L_total"])
            recent = recent[-len(samples):]
            if t.loss_threshold > 0 and len(recent) == len(samples) and np.mean(recent) < t.loss_threshold:
                result.stop_reason = "loss_threshold"
                break
            if eval_fn is not None and t.eval_every and t.target_map > 0 and (step + 1) % t.eval_every == 0:
                score = eval_fn(model)
                log.info("step %d: training mAP@1m %.3f", step + 1, score)
                if score >= t.target_map:
                    result.stop_reason = "target_map"
                    break
    except TrainingDivergedError:
        if out is not None:
            save_tensors(out / LAST_GOOD, last_good)
        raise
    finally:
        if fh is not None:
            fh.close()
        result.seconds = time.perf_counter() - start
    if out is not None:
        _write_checkpoint(model, out / CHECKPOINT)
    return result
