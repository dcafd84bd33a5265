"""Train-and-evaluate runs over the supervision arms."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ARM_TITLES, ARMS, ExperimentConfig
from .evaluate import evaluate_model
from .scene_sim import generate
from .train import train


@dataclass
class ArmResult:
    arm: str
    seed: int
    summary: dict
    steps: int
    seconds: float


def datasets(cfg: ExperimentConfig):
    """(training sequences, held-out sequences); both depend only on the data config."""
    return generate(cfg.data.scene_config()), generate(cfg.data.scene_config(held_out=True))


def run_arm(cfg: ExperimentConfig, arm: str, seed: int, train_seqs, eval_seqs, out_dir=None) -> ArmResult:
    run_cfg = cfg.with_overrides(arm=arm, seed=seed)
    run_out = Path(out_dir) / f"{arm}_seed{seed}" if out_dir is not None else None
    res = train(run_cfg, train_seqs, run_out)
    report = evaluate_model(res.model, eval_seqs, run_cfg)
    if run_out is not None:
        report.dump(run_out / "metrics.json")
    return ArmResult(arm, seed, report.summary, res.steps_run, res.seconds)


def ablate(cfg: ExperimentConfig, seeds=(0, 1, 2), arms=ARMS, out_dir=None, data=None) -> list[ArmResult]:
    train_seqs, eval_seqs = data if data is not None else datasets(cfg)
    return [run_arm(cfg, arm, s, train_seqs, eval_seqs, out_dir) for arm in arms for s in seeds]


def summarize(results: list[ArmResult], keys=("NDS", "mAP", "mATE", "mASE", "mAOE")) -> list[dict]:
    """One row per arm (mean over seeds), in the canonical arm order."""
    rows = []
    for arm in ARMS:
        rs = [r for r in results if r.arm == arm]
        if rs:
            rows.append({"arm": ARM_TITLES[arm], "seeds": len(rs),
                         **{k: float(np.mean([r.summary[k] for r in rs])) for k in keys}})
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    width = max(len(r["arm"]) for r in rows)
    lines = [f"{'Arm':<{width}}  " + "  ".join(f"{c:>6}" for c in cols[1:])]
    for r in rows:
        cells = [f"{r[c]:>6}" if isinstance(r[c], int) else f"{r[c]:>6.3f}" for c in cols[1:]]
        lines.append(f"{r['arm']:<{width}}  " + "  ".join(cells))
    return "\n".join(lines)


def write_table(results: list[ArmResult], out_dir) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = summarize(results)
    text = format_table(rows)
    (out / "ablation.txt").write_text(text + "\n")
    (out / "ablation.json").write_text(json.dumps(
        {"rows": rows, "runs": [r.__dict__ for r in results]}, indent=1))
    return text
