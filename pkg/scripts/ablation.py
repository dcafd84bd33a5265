"""Train every supervision arm on the same synthetic data and print the comparison table.

    python scripts/ablation.py --out runs/ablation --seeds 0 1 2
"""
import argparse
import logging
from pathlib import Path

from twostage_bev.ablation import ablate, write_table
from twostage_bev.config import ARMS, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(CONFIGS / "ablation.ini"))
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--arms", nargs="+", default=list(ARMS), choices=ARMS)
    ap.add_argument("--flags", nargs="*", default=[])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config).with_overrides(flags=args.flags)
    results = ablate(cfg, seeds=tuple(args.seeds), arms=tuple(args.arms), out_dir=args.out)
    print(write_table(results, args.out))


if __name__ == "__main__":
    main()
