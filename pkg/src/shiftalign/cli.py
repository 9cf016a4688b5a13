"""Command-line entry point: ``shiftalign run|list|export``.

Exit codes: 0 success, 1 usage error, 2 runtime failure (partial outputs kept).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError, IncompleteReportError
from .experiments import ExperimentConfig, export_curves, list_scenarios, run_scenario

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shiftalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario from a JSON experiment file")
    run.add_argument("config", type=Path)
    run.add_argument("--outdir", help="override the config's output directory")
    run.add_argument("--seeds", type=_seeds, help="comma-separated replicate seeds")
    run.add_argument("--parallel", type=int, default=1, metavar="K",
                     help="run up to K replicates in parallel processes")

    sub.add_parser("list", help="list registered scenarios")

    export = sub.add_parser("export", help="write plot-ready curve CSVs from a report")
    export.add_argument("report", type=Path)
    export.add_argument("--outdir", help="where to write curves (default: next to the report)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"shiftalign: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if args.command == "list":
        for name, description in list_scenarios():
            print(f"{name:24s} {description}")
        return EXIT_OK

    if args.command == "run":
        try:
            cfg = ExperimentConfig.from_json(args.config)
            if args.outdir:
                cfg.outdir = args.outdir
            if args.seeds:
                cfg.seeds = args.seeds
            if args.parallel < 1:
                raise ConfigurationError("--parallel must be at least 1")
            cfg.validate()
        except (OSError, ValueError, TypeError, UsageError) as exc:
            print(f"shiftalign: {exc}", file=sys.stderr)
            return EXIT_USAGE
        report = run_scenario(cfg, parallel=args.parallel)
        out = Path(cfg.outdir) / cfg.scenario / "report.json"
        if report["failures"]:
            for failure in report["failures"]:
                print(f"seed {failure['seed']} failed: {failure['error']}", file=sys.stderr)
            print(f"partial report written to {out}", file=sys.stderr)
            return EXIT_RUNTIME
        print(out)
        return EXIT_OK

    try:
        report = json.loads(args.report.read_text())
    except (OSError, ValueError) as exc:
        print(f"shiftalign: cannot read report: {exc}", file=sys.stderr)
        return EXIT_USAGE
    outdir = Path(args.outdir) if args.outdir else args.report.parent / "curves"
    try:
        paths = export_curves(report, outdir)
    except IncompleteReportError as exc:
        print(f"shiftalign: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for path in paths:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
