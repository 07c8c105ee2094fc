"""Command line: ``feedmesh run|gen|summarize``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import adaptors, harness
from .adaptors import TweetGenerator
from .catalog import CatalogError
from .ddl import DDLSyntaxError
from .fault import FaultScriptError
from .pipeline import PlanError


def _run(args: argparse.Namespace) -> int:
    if args.config is None and args.preset is None:
        print("feedmesh run: give --config or --preset", file=sys.stderr)
        return 2
    configs: list[harness.ExperimentConfig] = []
    if args.preset == "scalability":
        counts = [int(n) for n in (args.nodes or "1,2,4,8").split(",")]
        configs = [harness.scalability_config(n, args.seed or 0) for n in counts]
    elif args.preset == "fault":
        configs = [harness.fault_config(args.seed or 0)]
    else:
        configs = [harness.load_config(args.config)]
    status = 0
    for cfg in configs:
        if args.ddl:
            cfg.ddl, cfg.ddl_text = args.ddl, None
        if args.faults:
            cfg.faults, cfg.fault_text = args.faults, None
        if args.seed is not None:
            cfg.seed = args.seed
        if args.metrics:
            cfg.metrics = args.metrics
        if args.run and len(configs) == 1:
            cfg.run_name = args.run
        result = harness.run_experiment(cfg)
        print(f"== {cfg.run_name}: {result.csv_path} ({result.wall_seconds:.1f}s)")
        print(harness.format_summary(harness.summarize(result.csv_path)))
        if args.preset == "scalability":
            print(f"discarded fraction: {harness.discarded_fraction(result):.4f}")
        if not result.ok:
            status = 1
    return status


def _gen(args: argparse.Namespace) -> int:
    gen = TweetGenerator(args.rate, args.duration, args.seed, args.instance)

    def ready(port: int) -> None:
        print(f"serving {gen.total} records on {args.host}:{port}", flush=True)

    stats = adaptors.serve(gen, args.host, args.port, pull=args.pull, ready=ready)
    print(f"sent {stats.sent} records over {stats.connections} connection(s)")
    return 0


def _summarize(args: argparse.Namespace) -> int:
    summary = harness.summarize(args.csv)
    print(harness.format_summary(summary))
    return 1 if summary.identity is False else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feedmesh", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write metrics")
    run.add_argument("--config", help="key = value run file")
    run.add_argument("--preset", choices=sorted(harness.PRESETS))
    run.add_argument("--nodes", help="node counts for the scalability preset, e.g. 1,2,4,8")
    run.add_argument("--ddl", help="DDL script (overrides the config)")
    run.add_argument("--faults", help="fault script (overrides the config)")
    run.add_argument("--seed", type=int)
    run.add_argument("--metrics", help="output directory")
    run.add_argument("--run", help="run name, used for the CSV file name")
    run.set_defaults(func=_run)

    gen = sub.add_parser("gen", help="serve synthetic tweets over a socket")
    gen.add_argument("--host", default="127.0.0.1")
    gen.add_argument("--port", type=int, default=9000)
    gen.add_argument("--rate", type=float, default=100.0, help="records per second")
    gen.add_argument("--duration", type=float, default=10.0, help="seconds")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--instance", type=int, default=0)
    gen.add_argument("--pull", action="store_true", help="answer one batch per request")
    gen.set_defaults(func=_gen)

    summ = sub.add_parser("summarize", help="summarize a metrics CSV")
    summ.add_argument("csv")
    summ.set_defaults(func=_summarize)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, harness.SummaryError, DDLSyntaxError, CatalogError,
            FaultScriptError, PlanError, adaptors.AdaptorError) as exc:
        print(f"feedmesh: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
