"""``seqpar`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import sys
import time

from .comm import SCHEDULERS, ConfigError
from .harness import COMMANDS, ExperimentSpec, run_command
from .partition import LAYOUTS

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqpar", description="Sequence-parallel attention simulator and checks.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="experiment JSON (see docs/config_schema.json); defaults apply when omitted")
    p.add_argument("--out", required=True, help="output directory for CSV and SVG files")
    p.add_argument("--seed", type=int)
    p.add_argument("--engines", help="comma-separated engine list")
    p.add_argument("--sp", type=int, help="run a single sequence-parallel size")
    p.add_argument("--layout", choices=LAYOUTS)
    p.add_argument("--scheduler", choices=SCHEDULERS, help="rank scheduler (default lockstep)")
    return p


def _load(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        engines = [e.strip() for e in args.engines.split(",") if e.strip()] if args.engines else None
        spec = ExperimentSpec.from_dict(args.command, args.out, _load(args.config), seed=args.seed,
                                        engines=engines, sp=args.sp, layout=args.layout, scheduler=args.scheduler)
    except ConfigError as exc:
        print(f"seqpar: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        code, _ = run_command(spec)
    except ConfigError as exc:
        print(f"seqpar: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    # wall-clock goes to the console only, never into output files
    print(f"{args.command}: {'ok' if code == 0 else 'FAILURES'} in {time.perf_counter() - start:.1f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
