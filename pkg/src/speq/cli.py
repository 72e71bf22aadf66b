"""Command-line entry point: ``speq <subcommand> [--config FILE] ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, ExperimentConfig
from .pipeline import run_pipeline

SUBCOMMANDS = {
    "pretrain": "pretrain",
    "retrain": "retrain",
    "speq": "speq",
    "sweep": "sweep",
    "greedy": "greedy",
    "gradcheck": "gradcheck",
    "diversity": "diversity",
    "plotdata": "plotdata",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speq", description="Stochastic-precision self-distillation for quantized networks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, action="append", help="run seed (repeatable; overrides config seeds)")
        p.add_argument("--out-dir", default="runs", help="directory for checkpoints, metrics and plot data")
        p.add_argument("--checkpoint", help="upstream checkpoint (retrain/speq/greedy/sweep/diversity)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        mode = SUBCOMMANDS[args.command]
        # a speq run with a teacher checkpoint is the combined-loss variant
        if mode == "speq" and cfg.teacher_checkpoint:
            mode = "speq+kd"
        cfg = cfg.replace(mode=mode, **({"seeds": args.seed} if args.seed else {}))
        result = run_pipeline(cfg, args.out_dir, args.checkpoint)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for f in result.get("files", []):
        print(f)
    if "mean" in result:
        print(f"test accuracy: {result['mean']:.4f} +/- {result['std']:.4f} over {len(cfg.seeds)} seed(s)")
    if "max_tv" in result:
        print(f"max pairwise total variation: {result['max_tv']:.4f}")
    return 0 if result.get("ok", True) else 1


if __name__ == "__main__":
    sys.exit(main())
