"""Command line entry point: ``eacause <stage> --out DIR [--config FILE] [--seed N]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import Config, ConfigError
from .pipeline import STAGES, VALIDATION_ERRORS, Run, run_stage

log = logging.getLogger("eacause")


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eacause", description=__doc__)
    sub = parser.add_subparsers(dest="stage", required=True, metavar="STAGE")
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--out", required=True, type=Path, help="run directory")
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--seed", type=_seed, help="overrides the config seed")
        p.add_argument("--workers", type=int, default=1,
                       help="worker processes; results do not depend on it")
        if stage not in ("simulate", "report"):
            p.add_argument("--input", type=Path,
                           help="directory with cohort.csv, doses.csv and ea_steps.csv or streams/"
                                " (default: the run directory)")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("EACAUSE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return 0 if exc.code == 0 else 1
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        if args.config is not None and not args.config.exists():
            raise ConfigError(f"config file {args.config} does not exist")
        config = Config.load(args.config)
        seed = args.seed if args.seed is not None else int(config["seed"])
        if args.stage == "report" and not args.out.is_dir():
            raise ConfigError(f"run directory {args.out} does not exist")
        run = Run(args.out, config, seed, args.workers, getattr(args, "input", None))
        outputs = run_stage(run, args.stage)
    except VALIDATION_ERRORS as exc:
        print(f"eacause {args.stage}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"eacause {args.stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    log.info("wrote %s", ", ".join(outputs))
    return 0


if __name__ == "__main__":
    sys.exit(main())
