"""Command-line entry point: ``bsdp <stage> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Sequence

from . import stages
from .config import load_config
from .errors import BSDPError

PATH_FLAGS = ("trajectories", "regions", "legal_positions", "truth")


def _common_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value config file (default: $BSDP_CONFIG)")
    p.add_argument("--workdir", help="directory for all stage inputs and outputs")
    p.add_argument("--seed", type=int, help="seed for every random draw")
    p.add_argument("--jobs", type=int, help="worker processes for per-bucket clustering")
    p.add_argument("--strict", action="store_true", default=None, help="abort on the first malformed row")
    p.add_argument("--granularity", choices=("day", "week"))
    for name in PATH_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, metavar="PATH")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="bsdp", description="Dockless bike-sharing station planning.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "synth": "generate a synthetic city (trajectories, regions, legal positions, ground truth)",
        "cluster": "partition trajectories and cluster drop-offs per region and period",
        "graph": "build and prune a station graph per cluster file",
        "sequence": "assemble per-region graph sequences and fit the grid codec",
        "train": "train the recurrent forecaster per region",
        "predict": "forecast the next-period station graph",
        "recommend": "snap forecast stations to legal parking positions",
        "eval": "k-fold forecast evaluation and clustering AUC",
        "pipeline": "run cluster through eval in order",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "pipeline":
            sp.add_argument("--synth", action="store_true", help="generate the synthetic city first")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    values: dict = {}
    for item in args.overrides:
        if "=" not in item:
            raise SystemExit(f"bsdp: --set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for name in ("workdir", "seed", "jobs", "strict", "granularity", *PATH_FLAGS):
        value = getattr(args, name)
        if value is not None:
            values[name] = value
    return values


def _origin(exc: BaseException, default: str) -> str:
    """Name of the innermost package module the exception passed through."""
    here = Path(__file__).resolve().parent
    name = default
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        path = Path(frame.f_code.co_filename).resolve()
        if path.parent == here and path.stem not in ("cli", "stages", "errors"):
            name = path.stem
    return name


def _fail(kind: str, module: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "module": module, "message": message, **extra}), file=sys.stderr)
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "pipeline":
            result = stages.run_pipeline(cfg, with_synth=args.synth)
        else:
            result = stages.STAGES[args.command](cfg)
    except BSDPError as exc:
        return _fail(type(exc).__name__, _origin(exc, exc.module), str(exc))
    except FileNotFoundError as exc:
        return _fail("FileNotFoundError", args.command, str(exc), path=str(exc.filename or ""))
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
