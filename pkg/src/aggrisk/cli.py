"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 query parse or
semantic error, 4 data error.
"""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .engine import ExecConfig, execute, run_marginal, sequential_oracle
from .genio import GeneratorConfig, StepSpec, build_step_yet, generate_dataset, load_dataset, synthesize
from .querylang import QueryError, compile_query, parse_query
from .tables import DataError

EXIT_OK, EXIT_USAGE, EXIT_QUERY, EXIT_DATA = 0, 2, 3, 4
BENCH_COLUMNS = ("trials", "events", "layers", "elts", "workers", "job_size", "phase", "seconds")
BENCH_PHASES = ("setup", "map_combine", "reduce", "report", "total")

logger = logging.getLogger("aggrisk")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _weighted_events(text: str) -> list[tuple[int, float]]:
    pairs = []
    for item in text.split(","):
        if not item.strip():
            continue
        event, sep, weight = item.partition(":")
        try:
            pairs.append((int(event), float(weight) if sep else 1.0))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad id:weight item {item!r}") from None
    return pairs


def _add_exec_flags(p):
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--job-size", type=int, default=200)


def _add_query_flags(p, required=True):
    src = p.add_mutually_exclusive_group(required=required)
    src.add_argument("--query", type=Path, help="file holding the query text")
    src.add_argument("--sql", help="query text")
    _add_exec_flags(p)
    p.add_argument("--oracle", action="store_true", help="run the sequential oracle instead of the engine")
    p.add_argument("--out", type=Path, help="report path; stdout when absent")
    p.add_argument("--yelt", type=Path, help="debug: dump per-event portfolio losses here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aggrisk", description="Ad hoc aggregate risk analysis.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--trials", type=int, default=1000)
    g.add_argument("--events", type=int, default=100, help="events per trial")
    g.add_argument("--layers", type=int, default=40)
    g.add_argument("--elts-per-layer", type=int, default=5)
    g.add_argument("--catalogue", type=int, default=2000, help="event catalogue size")
    g.add_argument("--num-elts", type=int, default=None, help="ELT pool size (default layers x elts-per-layer)")
    g.add_argument("--regions", default="CA,FL,JP,TX")
    g.add_argument("--perils", default="EQ,FLD,HU,WS")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--out", type=Path, required=True)

    q = sub.add_parser("query", help="run a query against a dataset")
    q.add_argument("--data", type=Path, required=True)
    _add_query_flags(q)

    s = sub.add_parser("step", help="STEP analysis over a weighted event blend")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--events", type=_weighted_events, required=True, help="id:weight,id:weight,...")
    s.add_argument("--trials", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=42)
    _add_query_flags(s, required=False)

    b = sub.add_parser("bench", help="scaling benchmark")
    b.add_argument("--data", type=Path, help="dataset directory; generated in memory when absent")
    b.add_argument("--trials", type=int, default=2000)
    b.add_argument("--events", type=int, default=100)
    b.add_argument("--elts-per-layer", type=int, default=5)
    b.add_argument("--catalogue", type=int, default=2000)
    b.add_argument("--seed", type=int, default=42)
    b.add_argument("--workers-list", type=_int_list, default=[1])
    b.add_argument("--layers-list", type=_int_list, default=[200])
    b.add_argument("--job-size", type=int, default=200)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--sql", default="SELECT EP(1e6, 1e7, 1e8) FROM PORTFOLIO")
    b.add_argument("--out", type=Path, help="bench CSV path; stdout when absent")
    return parser


def _emit(text: str, out: Path | None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8", newline="\n")


def _query_text(args, default=None) -> str:
    if args.sql is not None:
        return args.sql
    if args.query is not None:
        try:
            return args.query.read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read query file: {exc}") from None
    if default is None:
        raise UsageError("one of --query or --sql is required")
    return default


def _exec_config(args) -> ExecConfig:
    try:
        return ExecConfig(workers=args.workers, job_size=args.job_size, yelt_path=getattr(args, "yelt", None))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _answer(text: str, dataset, args) -> str:
    query = parse_query(text)
    plan = compile_query(query, dataset, text.strip())
    cfg = _exec_config(args)
    if plan.marginal:
        return run_marginal(plan, dataset, cfg, oracle=args.oracle).report.to_csv()
    if args.oracle:
        return sequential_oracle(plan, dataset).to_csv()
    return execute(plan, dataset, cfg).report.to_csv()


def cmd_generate(args) -> int:
    try:
        cfg = GeneratorConfig(
            seed=args.seed,
            num_trials=args.trials,
            events_per_trial=args.events,
            num_layers=args.layers,
            elts_per_layer=args.elts_per_layer,
            catalogue_size=args.catalogue,
            regions=tuple(t for t in args.regions.split(",") if t),
            perils=tuple(t for t in args.perils.split(",") if t),
            num_elts=args.num_elts,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        generate_dataset(cfg, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write dataset: {exc}") from None
    logger.info("dataset written to %s", args.out)
    return EXIT_OK


def cmd_query(args) -> int:
    text = _query_text(args)
    dataset = load_dataset(args.data)
    _emit(_answer(text, dataset, args), args.out)
    return EXIT_OK


def cmd_step(args) -> int:
    if not args.events:
        raise UsageError("--events needs at least one id:weight item")
    try:
        spec = StepSpec(tuple(args.events), args.trials)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = load_dataset(args.data)
    missing = spec.missing_events(dataset.catalogue)
    if missing:
        raise DataError(f"unknown event ids: {missing}")
    step_data = replace(dataset, yet=build_step_yet(spec, args.seed))
    text = _query_text(args, default="SELECT STATS FROM PORTFOLIO")
    _emit(_answer(text, step_data, args), args.out)
    return EXIT_OK


@dataclass(frozen=True)
class BenchResult:
    trials: int
    events: int
    layers: int
    elts: int
    workers: int
    job_size: int
    seconds: dict

    def rows(self):
        for phase in BENCH_PHASES:
            yield (self.trials, self.events, self.layers, self.elts, self.workers, self.job_size, phase,
                   f"{self.seconds.get(phase, 0.0):.6f}")  # fmt: skip


def bench(dataset, sql, layers_list, workers_list, repeats, job_size) -> list[BenchResult]:
    """Time the query for every (layer count, worker count); median per phase."""
    query = parse_query(sql)
    full = compile_query(query, dataset, sql)
    events = int(dataset.yet.num_trials and len(dataset.yet) // dataset.yet.num_trials)
    results = []
    layer_map = dataset.layer_map()
    for n_layers in layers_list:
        if n_layers > len(full.layer_ids):
            raise UsageError(f"dataset has only {len(full.layer_ids)} selectable layers, asked for {n_layers}")
        layer_ids = full.layer_ids[:n_layers]
        wanted = {e for lid in layer_ids for e in layer_map[lid].elt_ids}
        plan = full.with_layers(layer_ids, [e for e in full.elt_ids if e in wanted])
        for workers in workers_list:
            cfg = ExecConfig(workers=workers, job_size=job_size)
            samples = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                run = execute(plan, dataset, cfg)
                t1 = time.perf_counter()
                run.report.to_csv()
                t2 = time.perf_counter()
                phases = dict(run.timings)
                phases["report"] = t2 - t1
                phases["total"] = t2 - t0
                samples.append(phases)
            median = {ph: statistics.median(s.get(ph, 0.0) for s in samples) for ph in BENCH_PHASES}
            results.append(
                BenchResult(dataset.yet.num_trials, events, n_layers, len(plan.elt_ids), workers, job_size, median)
            )
            logger.info("layers=%d workers=%d total=%.3fs", n_layers, workers, median["total"])
    return results


def bench_csv(results) -> str:
    lines = [",".join(BENCH_COLUMNS)]
    for r in results:
        lines += [",".join(map(str, row)) for row in r.rows()]
    return "\n".join(lines) + "\n"


def cmd_bench(args) -> int:
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if args.data is not None:
        dataset = load_dataset(args.data)
    else:
        try:
            cfg = GeneratorConfig(
                seed=args.seed,
                num_trials=args.trials,
                events_per_trial=args.events,
                num_layers=max(args.layers_list),
                elts_per_layer=args.elts_per_layer,
                catalogue_size=args.catalogue,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        dataset = synthesize(cfg)
    results = bench(dataset, args.sql, args.layers_list, args.workers_list, args.repeats, args.job_size)
    _emit(bench_csv(results), args.out)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "query": cmd_query, "step": cmd_step, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"aggrisk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except QueryError as exc:
        print(exc.caret(), file=sys.stderr)
        return EXIT_QUERY
    except DataError as exc:
        print(f"aggrisk: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
