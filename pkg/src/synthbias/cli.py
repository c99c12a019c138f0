"""Command-line entry point: ``synthbias <subcommand> ...``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training divergence,
5 lineage verification failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .evaluate import EvalError
from .lineage import LineageError, verify
from .metrics import MetricError, full_report
from .nn import TrainingDiverged
from .pipeline import ConfigError, Pipeline, load_config
from .schema import DataError, SchemaError, SensitiveSpec, load_schema, parse_table
from .skew import SkewError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_VERIFY = 5

STAGE_COMMANDS = {
    "ingest": "ingest",
    "skew": "skew",
    "train": "train",
    "synth": "synthesize",
    "evaluate": "evaluate",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config (YAML); 'builtin:adult_demo.yaml' for the census demo")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", help="run directory")
    p.add_argument("--suite", help="variation suite name or spec file")
    p.add_argument("--k", type=int, help="neighbours for consistency")
    p.add_argument("--mode", choices=("reconstruction", "prior"), help="synthesis mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthbias", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the whole pipeline (or one --stage)")
    _add_run_flags(p)
    p.add_argument("--stage", choices=("ingest", "skew", "train", "synthesize", "evaluate"))

    for name, stage in STAGE_COMMANDS.items():
        p = sub.add_parser(name, help=f"run only the {stage} stage against the run directory")
        _add_run_flags(p)

    p = sub.add_parser("metrics", help="print the bias report of one table")
    p.add_argument("data")
    p.add_argument("--schema")
    p.add_argument("--label", help="label column when no schema is given (default: last)")
    p.add_argument("--sensitive", nargs=3, metavar=("COLUMN", "UNPRIVILEGED", "PRIVILEGED"))
    p.add_argument("--delimiter", default=",")
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("verify-log", help="check a lineage log's hash chain")
    p.add_argument("log")
    return parser


def _metrics(args) -> int:
    schema = load_schema(args.schema) if args.schema else None
    sens = SensitiveSpec(*args.sensitive) if args.sensitive else None
    d = parse_table(args.data, schema, label=args.label, sensitive=sens, delimiter=args.delimiter)
    sys.stdout.write(f"n={len(d)}\n")
    sys.stdout.write(full_report(d, args.k).to_text())
    return EXIT_OK


def _verify(args) -> int:
    if not Path(args.log).exists():
        print(f"error: no such log {args.log}", file=sys.stderr)
        return EXIT_CONFIG
    broken = verify(args.log)
    if broken is None:
        print("ok")
        return EXIT_OK
    print(f"broken at seq {broken}")
    return EXIT_VERIFY


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "metrics":
            return _metrics(args)
        if args.command == "verify-log":
            return _verify(args)
        cfg = load_config(args.config, seed=args.seed, out=args.out, suite=args.suite,
                          k=args.k, mode=args.mode)
        stage = args.stage if args.command == "run" else STAGE_COMMANDS[args.command]
        pipe = Pipeline(cfg)
        pipe.run(stage)
        if stage is None:
            broken = verify(pipe.out / "lineage.jsonl")
            if broken is not None:
                print(f"error: lineage log broken at seq {broken}", file=sys.stderr)
                return EXIT_VERIFY
            print((pipe.report_dir / "summary.txt").read_text(encoding="utf-8"), end="")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except LineageError as exc:
        print(f"lineage error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (DataError, SchemaError, SkewError, MetricError, EvalError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
