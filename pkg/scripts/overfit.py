"""Overfit the two-stage detector on ten fixed frames and report mAP@1m.

    python scripts/overfit.py --out runs/overfit
"""
import argparse
import logging
from pathlib import Path

from twostage_bev.config import load_config
from twostage_bev.evaluate import map_at, run_eval
from twostage_bev.scene_sim import generate
from twostage_bev.train import train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(CONFIGS / "overfit.ini"))
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--steps", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg.train.steps = args.steps
    seqs = generate(cfg.data.scene_config())
    res = train(cfg, seqs, args.out, eval_fn=lambda m: map_at(m, seqs))
    report = run_eval(res.model, seqs, args.out)
    print(f"{res.steps_run} steps in {res.seconds:.0f}s ({res.stop_reason}); "
          f"mAP@1m {report.summary['mAP@1']:.3f}, NDS {report.summary['NDS']:.3f}")


if __name__ == "__main__":
    main()
