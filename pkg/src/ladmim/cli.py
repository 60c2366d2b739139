"""Command-line entry point.

Subcommands: gen-data, train-hvq, train-lavit, eval, ablate, diagnose.
Exit codes: 0 success, 1 invalid config, 2 missing prerequisite checkpoint
or dataset, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .hvq import TrainingDiverged
from .lavit import TARGET_MODES
from .pipeline import (MissingPrerequisite, gen_data, run_ablate, run_diagnose,
                       run_eval, run_train_hvq, run_train_lavit)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_MISSING = 2
EXIT_DIVERGED = 3


def _add_common(p):
    p.add_argument("--config", help="JSON config file (defaults used otherwise)")
    p.add_argument("--seed", type=int, help="override all four seeds at once")
    p.add_argument("--out", required=True, help="output directory or file")


def build_parser():
    parser = argparse.ArgumentParser(prog="ladmim",
                                     description="logical/structural anomaly detection "
                                                 "on the synthetic multi-object benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    _add_common(p)

    p = sub.add_parser("train-hvq", help="stage 1: train the reconstruction model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("train-lavit", help="stage 2: train the masked-prediction model")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--hvq", required=True, help="stage-1 checkpoint")
    p.add_argument("--target", choices=TARGET_MODES, help="prediction target override")

    p = sub.add_parser("eval", help="score the test split and write reports")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--hvq", required=True)
    p.add_argument("--lavit", required=True, help="stage-2 checkpoint")
    p.add_argument("--n-masks", type=int, help="masks per image at inference")
    p.add_argument("--mask-ratio", type=float)

    p = sub.add_parser("ablate", help="train/evaluate every prediction target")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--hvq", required=True)
    p.add_argument("--target", choices=TARGET_MODES, action="append",
                   help="restrict to given target(s); repeatable")

    p = sub.add_parser("diagnose", help="codebook usage / collision / redundancy report")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--hvq", required=True)
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.init_seed = cfg.mask_seed = cfg.data_seed = cfg.eval_seed = args.seed
    if getattr(args, "n_masks", None) is not None:
        cfg.n_masks = args.n_masks
    if getattr(args, "mask_ratio", None) is not None:
        cfg.mask_ratio = args.mask_ratio
    if getattr(args, "target", None) is not None and isinstance(args.target, str):
        cfg.target_mode = args.target
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "gen-data":
            manifest = gen_data(cfg, args.out)
            print(f"wrote {len(manifest['images'])} images to {args.out}")
        elif args.command == "train-hvq":
            meta = run_train_hvq(cfg, args.data, args.out)
            final = meta["metrics"]["history"][-1] if meta["metrics"]["history"] else {}
            print(f"hvq checkpoint at {args.out} (final: {final})")
        elif args.command == "train-lavit":
            meta = run_train_lavit(cfg, args.data, args.hvq, args.out,
                                   target_mode=args.target)
            final = meta["metrics"]["history"][-1] if meta["metrics"]["history"] else {}
            print(f"lavit checkpoint at {args.out} (final: {final})")
        elif args.command == "eval":
            report = run_eval(cfg, args.data, args.hvq, args.lavit, args.out)
            print(json.dumps(report["auroc"], indent=1, sort_keys=True))
        elif args.command == "ablate":
            summary = run_ablate(cfg, args.data, args.hvq, args.out, modes=args.target)
            print(json.dumps(summary["grid"], indent=1, sort_keys=True))
        elif args.command == "diagnose":
            report = run_diagnose(cfg, args.data, args.hvq, args.out)
            for layer, rep in sorted(report["layers"].items()):
                print(f"layer {layer}: active={rep['active_codes']} "
                      f"perplexity={rep['perplexity']:.2f}")
    except (MissingPrerequisite, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, NotImplementedError) as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
