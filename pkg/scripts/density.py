"""Fraction of stride-8 image-feature locations reached by each loss's gradient, per frame."""
import argparse

from twostage_bev.analysis import gradient_density
from twostage_bev.config import DataConfig, load_config
from twostage_bev.model import TwoStageDetector
from twostage_bev.scene_sim import generate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--frames", type=int, default=20)
    ap.add_argument("--seed", type=int, default=404)
    args = ap.parse_args()
    cfg = load_config(args.config)
    cfg.data = DataConfig(num_sequences=args.frames, frames_per_sequence=1, min_objects=3,
                          max_objects=6, seed=args.seed)
    model = TwoStageDetector(cfg.validate())
    print("frame  objects  pers    bev")
    for i, seq in enumerate(generate(cfg.data.scene_config())):
        r = gradient_density(model, seq[0])
        print(f"{i:5d}  {len(seq[0].gt_boxes):7d}  {r.pers:.3f}  {r.bev:.3f}")


if __name__ == "__main__":
    main()
