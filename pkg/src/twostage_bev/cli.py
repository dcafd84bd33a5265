"""Command line: ``twostage-bev generate|train|eval|ablate``.

Exit codes: 0 ok, 2 config, 3 data, 4 training diverged, 5 checkpoint, 1 anything else.
Failures print ``error[<category>]: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .ablation import ablate, write_table
from .autodiff.checkpoint import CheckpointError
from .config import ARMS, FLAGS, ConfigError, ExperimentConfig, load_config, save_config
from .evaluate import run_eval
from .scene_sim import SceneFormatError, deserialize, generate, group_sequences, serialize
from .train import CHECKPOINT, TrainingDivergedError, load_model, train

EXIT_CODES = {"config": 2, "data": 3, "diverged": 4, "checkpoint": 5, "internal": 1}


def _flags(text: str | None):
    if text is None:
        return None
    return [f.strip() for f in text.split(",") if f.strip()]


def effective_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(arm=getattr(args, "arm", None), flags=_flags(getattr(args, "flags", None)),
                              seed=args.seed)


def _load_sequences(path):
    p = Path(path)
    if not (p / "manifest.jsonl").exists():
        raise SceneFormatError(f"no scene manifest under {p}")
    return group_sequences(deserialize(p))


def cmd_generate(args) -> int:
    cfg = effective_config(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    serialize(generate(cfg.data.scene_config()), out / "train")
    serialize(generate(cfg.data.scene_config(held_out=True)), out / "eval")
    save_config(cfg, out / "config.ini")
    print(f"wrote scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = effective_config(args)
    seqs = _load_sequences(args.data) if args.data else generate(cfg.data.scene_config())
    res = train(cfg, seqs, args.out)
    last = res.rows[-1] if res.rows else {}
    print(f"trained {res.steps_run} steps in {res.seconds:.1f}s ({res.stop_reason}); "
          f"final L_total {last.get('L_total', float('nan')):.4f}; outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / CHECKPOINT
    if not ckpt.exists():
        raise CheckpointError(f"checkpoint not found: {ckpt}")
    model = load_model(cfg, ckpt)
    seqs = _load_sequences(args.data) if args.data else generate(cfg.data.scene_config(held_out=True))
    report = run_eval(model, seqs, args.out, plots=not args.no_plots and cfg.eval.plots)
    s = report.summary
    print(f"NDS {s['NDS']:.4f}  mAP {s['mAP']:.4f}  metrics in {Path(args.out) / 'metrics.json'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config).with_overrides(flags=_flags(args.flags))
    base = args.seed if args.seed is not None else cfg.train.seed
    seeds = tuple(range(base, base + args.num_seeds))
    results = ablate(cfg, seeds=seeds, out_dir=args.out)
    print(write_table(results, args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twostage-bev", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="INI config; defaults when omitted")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="run directory")

    g = sub.add_parser("generate", help="write synthetic train/eval scenes")
    common(g)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train one arm")
    common(t)
    t.add_argument("--arm", choices=ARMS)
    t.add_argument("--flags", help=f"comma list from {','.join(FLAGS)}")
    t.add_argument("--data", help="scene directory from 'generate' (train split)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint")
    common(e)
    e.add_argument("--arm", choices=ARMS)
    e.add_argument("--flags")
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="scene directory (eval split)")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare all four supervision arms")
    common(a)
    a.add_argument("--flags")
    a.add_argument("--num-seeds", type=int, default=3)
    a.set_defaults(fn=cmd_ablate)
    return p


def _category(exc: Exception) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (SceneFormatError, FileNotFoundError)):
        return "data"
    if isinstance(exc, TrainingDivergedError):
        return "diverged"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001
        category = _category(exc)
        if category == "internal":
            logging.getLogger(__name__).debug("unhandled", exc_info=True)
        print(f"error[{category}]: {exc}", file=sys.stderr)
        return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
