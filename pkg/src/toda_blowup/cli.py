"""Command-line entry point: ``toda-blowup <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import load_config
from .errors import ConfigurationError
from .pipeline import STAGES, RunContext, StageError, run_stage

EXIT_CONFIG = 2
EXIT_STAGE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toda-blowup", description="Numerical lab for partial blow-up in the SU(3) Toda system.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--out", help="output directory (overrides the configuration)")
    common.add_argument("--seed", type=int, help="random seed (overrides the configuration)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for independent solves")
    common.add_argument("--verbosity", type=int, default=0, help="0 quiet, 1 progress, 2 debug and solver traces")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbosity, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        cfg.validate()
    except (ConfigurationError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ctx = RunContext(cfg, cfg.output_dir, threads=max(1, args.threads or os.cpu_count() or 1), verbosity=args.verbosity)
    try:
        run_stage(args.command, ctx)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    print(f"{args.command}: ok ({len(ctx.written)} files in {ctx.out})")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
