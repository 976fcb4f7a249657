"""Command-line entry point: ``nlbackbone {derive,solve,simulate,verify,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import NlBackboneError
from .config import default_config, load_config
from .report import read_results, write_summary
from .runner import run_derive, run_report, run_simulate, run_solve, run_verify


def _config(args):
    cfg = load_config(args.config) if args.config else default_config()
    return cfg.with_overrides(seed=args.seed, replicates=args.replicates)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file (defaults to the built-in reference setup)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--replicates", type=int, help="override Monte Carlo replicate counts")
    common.add_argument("--out", default="results", help="output directory (default: %(default)s)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nlbackbone", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("derive", parents=[common], help="print derived constants and offspring laws")

    p = sub.add_parser("solve", parents=[common], help="solve one equation with constant data")
    p.add_argument("equation", choices=["u", "u_star", "v", "w", "backbone"])
    p.add_argument("-f", type=float, default=0.5)
    p.add_argument("--h", type=float, default=0.0)
    p.add_argument("-t", type=float, default=1.0)
    p.add_argument("--grid", action="store_true", help="solve on the configured spatial grid")

    p = sub.add_parser("simulate", parents=[common], help="sample dressed backbones")
    p.add_argument("-f", type=float, default=0.5)
    p.add_argument("--h", type=float, default=0.0)
    p.add_argument("-t", type=float, default=1.0)

    p = sub.add_parser("verify", parents=[common], help="run the verification checks")
    p.add_argument("--only", nargs="*", help="restrict to these check names")

    p = sub.add_parser("report", parents=[common], help="summarise an existing results.tsv")
    p.add_argument("results", help="path to results.tsv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            records = read_results(args.results)
            path = write_summary(records, Path(args.out) / "summary.txt", timings=False)
            print(path.read_text(), end="")
            return 0 if all(r.passed for r in records) else 1
        cfg = _config(args)
        if args.command == "derive":
            print(run_derive(cfg), end="")
            return 0
        if args.command == "solve":
            print(run_solve(cfg, args.equation, args.f, args.h, args.t, args.out, args.grid))
            return 0
        if args.command == "simulate":
            print(run_simulate(cfg, args.t, args.f, args.h, args.out))
            return 0
        records = run_verify(cfg, args.only)
        paths = run_report(records, args.out)
        print(paths["summary"].read_text(), end="")
        return 0 if records and all(r.passed for r in records) else 1
    except (NlBackboneError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
