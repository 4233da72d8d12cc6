"""``neuropipe`` command line.

Exit status: 0 success, 1 configuration error, 2 runtime error, 3 failed check.
"""
from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

import torch

from ..errors import BadConfig, ConfigError, NeuropipeError
from . import runner
from .config import load_config
from .gradcheck import main_report

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neuropipe", description="Brain-MRI classification, detection and segmentation runs.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name: str, help_text: str, optional: bool = False) -> argparse.ArgumentParser:
        c = sub.add_parser(name, help=help_text)
        c.add_argument("config", nargs="?" if optional else None, help="run config file (key = value lines)")
        c.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)")
        return c

    with_config("train", "train a model and write model.pt plus history.csv")
    for name, text in (("evaluate", "score a checkpoint and write report.csv"), ("predict", "write per-subject prediction files")):
        c = with_config(name, text)
        c.add_argument("--checkpoint", help="checkpoint path (default: <output dir>/model.pt)")
        if name == "predict":
            c.add_argument("--split", default="test", help="manifest split to predict on (or 'all')")
    with_config("ablate", "retrain per modality subset and write ablation.csv")
    with_config("gen-data", "write a synthetic dataset and its manifest")
    g = with_config("gradcheck", "run the finite-difference gradient suite", optional=True)
    g.add_argument("--seed", type=int, default=0)
    return p


def _dispatch(args) -> int:
    echo = print
    if args.command == "gradcheck":
        if args.config:
            load_config(args.config, args.overrides)
        return EXIT_OK if main_report(args.seed, echo) else EXIT_CHECK
    cfg = load_config(args.config, args.overrides)
    if args.command == "train":
        runner.train_run(cfg, echo)
    elif args.command == "evaluate":
        runner.evaluate_run(cfg, args.checkpoint, echo)
    elif args.command == "predict":
        runner.predict_run(cfg, args.checkpoint, args.split, echo)
    elif args.command == "ablate":
        runner.ablate_run(cfg, echo)
    elif args.command == "gen-data":
        runner.gen_data_run(cfg, echo)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return _dispatch(args)
    except (ConfigError, BadConfig) as exc:
        print(f"neuropipe: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NeuropipeError, OSError, RuntimeError, ValueError, KeyError) as exc:
        print(f"neuropipe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
