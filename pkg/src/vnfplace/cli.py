"""Command line entry point: solve, sweep, validate, corpus-list."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .des import SimConfig, Unstable
from .experiments import (EXIT_INFEASIBLE, EXIT_INPUT, EXIT_OK, STRATEGIES, RunOptions, csv_text, run_solve,
                          run_sweep, run_validate)
from .model import UnstableQueue
from .scenario import ScenarioError, corpus_names, load_scenario


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("scenario", help="scenario file path or bundled corpus name")
    p.add_argument("--out", help="write result rows as CSV to this path")
    p.add_argument("--workers", type=int, default=1, help="worker processes (sweep cells / brute-force chunks)")
    p.add_argument("--link-capacity-enforce", action="store_true",
                   help="reject placements whose inter-host flows exceed link capacity")
    p.add_argument("--tolerance", type=float, default=1e-7, help="convex solver tolerance")
    p.add_argument("--time-budget", type=float, default=None, help="brute-force time budget in seconds")
    p.add_argument("--timing", action="store_true", help="add a wall-time column (makes CSV output non-deterministic)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vnfplace", description="VNF placement and CPU allocation experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="place and allocate one scenario")
    _common(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="auto")

    p = sub.add_parser("sweep", help="run the scenario's sweep for one or more strategies")
    _common(p)
    p.add_argument("--strategy", action="append", choices=STRATEGIES,
                   help="repeatable; default maxz, greedy, affinity, brute")

    p = sub.add_parser("validate", help="solve, then check analytic delays against simulation")
    _common(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="auto")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--warmup", type=int, default=10_000)
    p.add_argument("--requests", type=int, default=100_000)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--perturb-analytic", type=float, default=0.0, metavar="FRACTION",
                   help="debug: scale service rates on the analytic side by 1+FRACTION")

    sub.add_parser("corpus-list", help="list bundled scenarios")
    return ap


def _options(args) -> RunOptions:
    return RunOptions(link_capacity=True if args.link_capacity_enforce else None, tolerance=args.tolerance,
                      workers=args.workers, time_budget=args.time_budget)


def _emit_csv(reports, args) -> None:
    if args.out:
        Path(args.out).write_text(csv_text(reports, args.timing))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "corpus-list":
        for name in corpus_names():
            try:
                sc = load_scenario(name)
                note = " (reconstruction)" if sc.reconstruction else ""
                sweep = f" sweep {sc.sweep.parameter} x{len(sc.sweep.values)}" if sc.sweep else ""
                print(f"{name}: {sc.description}{note}{sweep}")
            except ScenarioError as exc:
                print(f"{name}: unreadable ({exc})")
        return EXIT_OK

    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INPUT
    opts = _options(args)

    if args.command == "solve":
        rep = run_solve(scenario, args.strategy, opts)
        print(rep.summary())
        _emit_csv([rep], args)
        return rep.exit_code

    if args.command == "sweep":
        strategies = args.strategy or ["maxz", "greedy", "affinity", "brute"]
        reports = run_sweep(scenario, strategies, opts)
        for r in reports:
            val = "" if r.sweep_value is None else f" {r.sweep_parameter}={r.sweep_value:g}"
            obj = "-" if r.allocation is None else f"{r.objective:.6g}"
            print(f"{r.scenario}{val} {r.strategy}: {r.status} {obj}")
        _emit_csv(reports, args)
        if any(r.status == "error" for r in reports):
            return EXIT_INPUT
        return EXIT_OK

    try:
        cfg = SimConfig(seed=args.seed, warmup_requests=args.warmup, measured_requests=args.requests,
                        batch_count=args.batches)
    except ValueError as exc:
        print(f"invalid simulation settings: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        run = run_validate(scenario, args.strategy, cfg, opts, perturb=args.perturb_analytic)
    except (Unstable, UnstableQueue) as exc:
        print(f"simulation unstable: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(run.report.summary())
    if run.sim is not None:
        print(f"simulation: seed {run.sim.seed}, {run.sim.rng}, {cfg.measured_requests} measured requests")
        for v in run.verdicts:
            print(f"  {v.label} class {v.class_id}: analytic {v.analytic:.6g} ms, simulated {v.simulated:.6g} "
                  f"+/- {v.half_width:.3g} ms ({v.deviation:+.2%})")
    _emit_csv([run.report], args)
    return run.exit_code


if __name__ == "__main__":
    sys.exit(main())
