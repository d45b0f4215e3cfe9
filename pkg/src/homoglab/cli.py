"""Command-line entry point.

Exit codes: 0 success, 2 configuration/validation error, 3 numerical
failure, 4 too many per-realization failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .homogenize import BracketingError, ExperimentError
from .runner import (OutputLockError, RerunRefusedError, envelope_check, run)
from .solver import NonConvergenceError
from .selftest import selftest

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_PARTIAL = 4


def _add_run_args(sub):
    sub.add_argument("--config", required=True, help="experiment config file")
    sub.add_argument("--out", default=None, help="output directory override")
    sub.add_argument("--workers", type=int, default=None)
    sub.add_argument("--seed", type=int, default=None, help="master seed override")
    sub.add_argument("--force", action="store_true",
                     help="redo a run already recorded in the output directory")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="homoglab",
        description="curvature-based homogenization experiments for random "
                    "elliptic operators")
    subs = parser.add_subparsers(dest="command", required=True)

    for kind in ("mu", "mu-decay", "effective", "error-rate"):
        _add_run_args(subs.add_parser(kind, help=f"run a {kind} experiment"))

    env = subs.add_parser("envelope-check",
                          help="measure a stored grid function both ways")
    env.add_argument("--grid", required=True)
    env.add_argument("--region", nargs=4, type=float, default=None,
                     metavar=("x0", "y0", "x1", "y1"))
    env.add_argument("--out", default=None)
    env.add_argument("--slopes", type=int, default=4000)
    env.add_argument("--seed", type=int, default=0)

    subs.add_parser("selftest", help="run the fast invariant suite")

    args = parser.parse_args(argv)

    try:
        if args.command == "selftest":
            rep = selftest()
            return EXIT_OK if rep.ok else EXIT_NUMERICAL

        if args.command == "envelope-check":
            report = envelope_check(args.grid, args.region, args.out,
                                    args.slopes, args.seed)
            print(f"measure          = {report['measure']!r}")
            print(f"mc estimate      = {report['mc_estimate']!r} "
                  f"(stderr {report['mc_stderr']:.3g})")
            for name, ok in report["checks"].items():
                print(f"[{'PASS' if ok else 'FAIL'}] {name}")
            return EXIT_OK if report["ok"] else EXIT_NUMERICAL

        text = Path(args.config).read_text()
        config = ExperimentConfig.parse(text)
        if config.kind != args.command:
            raise ConfigError(
                f"kind: config says {config.kind!r} but the "
                f"{args.command!r} subcommand was invoked")
        rec = run(config, out=args.out, workers=args.workers, seed=args.seed,
                  force=args.force)
        n_total = max(len(rec.statuses), 1)
        if rec.partial_failures:
            print(f"warning: {rec.partial_failures} realization(s) failed "
                  f"out of {n_total}", file=sys.stderr)
        print(f"run {rec.run_id} complete; outputs: {', '.join(rec.files)}")
        return EXIT_OK
    except (ConfigError, FileNotFoundError, RerunRefusedError,
            OutputLockError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BracketingError, NonConvergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ExperimentError as exc:
        print(f"too many failures: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
