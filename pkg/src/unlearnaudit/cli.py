"""Command-line entry point: ``unlearnaudit <stage> [options]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import backend
from . import config as cfgmod
from . import pipeline
from .errors import AuditError, ConfigError

COMMANDS = (*pipeline.STAGES, "all")


def _default_workers() -> int:
    raw = os.environ.get("UNLEARNAUDIT_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"UNLEARNAUDIT_WORKERS must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearnaudit", description="Per-sample unlearning audit pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help="run every stage" if name == "all" else f"run the {name} stage")
        p.add_argument("--config", type=Path, help="JSON config; defaults apply to omitted keys")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--workers", type=int, default=None, help="worker processes (default: $UNLEARNAUDIT_WORKERS or 1)")
        p.add_argument("--overwrite", action="store_true", help="replace outputs produced by a different config")
        if name != "all":
            p.add_argument("--force", action="store_true", help="re-run the stage even if it is up to date")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = cfgmod.load(args.config) if args.config else cfgmod.resolve({})
    out = args.out if args.out is not None else Path(cfg["output_dir"])
    workers = args.workers if args.workers is not None else _default_workers()
    if workers < 1:
        raise ConfigError("--workers must be >= 1")
    logging.getLogger(__name__).info("kernels: %s, workers: %d", backend.NAME, workers)
    ctx = pipeline.Context(cfg, out, workers=workers, overwrite=args.overwrite)
    try:
        if args.command == "all":
            ran = pipeline.run_all(ctx)
            print(f"{out}: ran {', '.join(ran) if ran else 'nothing (up to date)'}")
        else:
            ran = pipeline.run_stage(ctx, args.command, force=args.force)
            print(f"{out}: {args.command} {'done' if ran else 'up to date'}")
    finally:
        ctx.close()
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except AuditError as exc:
        print(f"unlearnaudit: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
