"""End-to-end runs: strategy dispatch, sweeps, simulation checks, CSV rows."""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .allocation import AllocationResult, allocate
from .baselines import BudgetExceeded, affinity_place, brute_force, greedy_place
from .des import SimConfig, SimReport, Verdict, compare_to_analytic, simulate
from .maxz import run_maxz
from .model import CpuAllocation, InfeasibleError, Placement, UnstableQueue, ValidatedInstance, validate_instance
from .replicas import ReplicatedInstance, SplitSearchConfig, pattern_search_split, replicate_graph
from .scenario import Scenario
from .traffic import DelayBreakdown, class_delays, solve_traffic

STRATEGIES = ("maxz", "auto", "greedy", "affinity", "brute", "fixed")

CSV_COLUMNS = ("scenario", "sweep_parameter", "sweep_value", "strategy", "status", "objective", "placement",
               "hosts_used", "delay_ms", "processing_ms", "network_ms", "ratio", "iterations", "alloc_method",
               "alloc_iterations", "split", "message")
TIMING_COLUMN = "wall_time_s"

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_VALIDATION = 0, 1, 2, 3


@dataclass
class RunOptions:
    link_capacity: bool | None = None
    tolerance: float = 1e-7
    workers: int = 1
    time_budget: float | None = None


@dataclass
class SolveReport:
    scenario: str
    strategy: str
    status: str  # ok | infeasible | budget_exceeded | error
    instance: ValidatedInstance | None = None
    placement: Placement | None = None
    allocation: AllocationResult | None = None
    iterations: int = 0
    wall_time: float = 0.0
    message: str = ""
    sweep_parameter: str = ""
    sweep_value: float | None = None
    split: dict[str, tuple[float, ...]] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def objective(self) -> float:
        return math.inf if self.allocation is None else float(self.allocation.rho)

    @property
    def delays(self) -> DelayBreakdown | None:
        return None if self.allocation is None else self.allocation.delays

    @property
    def exit_code(self) -> int:
        return {"ok": EXIT_OK, "budget_exceeded": EXIT_OK, "infeasible": EXIT_INFEASIBLE}.get(self.status, EXIT_INPUT)

    def row(self, timing: bool = False) -> dict[str, str]:
        d = self.delays
        row = {
            "scenario": self.scenario,
            "sweep_parameter": self.sweep_parameter,
            "sweep_value": "" if self.sweep_value is None else _fmt(self.sweep_value),
            "strategy": self.strategy,
            "status": self.status,
            "objective": "" if self.allocation is None else _fmt(self.objective),
            "placement": "" if self.placement is None else ";".join(map(str, self.placement.host_of)),
            "hosts_used": "" if self.placement is None else str(self.placement.hosts_used()),
            "delay_ms": _join(d.total) if d else "",
            "processing_ms": _join(d.processing) if d else "",
            "network_ms": _join(d.network) if d else "",
            "ratio": _join(d.ratio) if d else "",
            "iterations": str(self.iterations),
            "alloc_method": self.allocation.method if self.allocation else "",
            "alloc_iterations": str(self.allocation.iterations) if self.allocation else "",
            "split": "" if not self.split else " ".join(f"{k}=" + ";".join(_fmt(x) for x in v)
                                                        for k, v in sorted(self.split.items())),
            "message": self.message.replace("\n", " "),
        }
        if timing:
            row[TIMING_COLUMN] = f"{self.wall_time:.4f}"
        return row

    def summary(self) -> str:
        lines = [f"scenario {self.scenario}, strategy {self.strategy}: {self.status}"]
        if self.message:
            lines.append(f"  {self.message}")
        if self.allocation is not None and self.instance is not None:
            inst = self.instance
            lines.append(f"  objective (max D/QoS): {self.objective:.6g}")
            lines.append(f"  placement: {self.placement.describe(inst)}")
            lines.append("  service rates: " + ", ".join(f"{q}={m:.6g}" for q, m in
                                                         zip(inst.queue_ids, self.allocation.alloc.mu)))
            d = self.delays
            for k, cid in enumerate(inst.class_ids):
                lines.append(f"  class {cid}: delay {d.total[k]:.6g} ms (processing {d.processing[k]:.6g}, "
                             f"network {d.network[k]:.6g}), ratio {d.ratio[k]:.6g}")
            if self.split:
                lines.append("  split: " + ", ".join(f"{k}={v}" for k, v in sorted(self.split.items())))
        return "\n".join(lines)


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def _join(values) -> str:
    return ";".join(_fmt(v) for v in values)


# ---------------------------------------------------------------------------
# strategies


def _fixed_placer(mapping: dict[str, str] | None) -> Callable[[ValidatedInstance], Placement]:
    def place(inst: ValidatedInstance) -> Placement:
        if mapping is None:
            raise ValueError("strategy 'fixed' needs a placement block in the scenario")
        host_index = {h: i for i, h in enumerate(inst.host_ids)}
        return Placement(tuple(host_index[mapping[q]] for q in inst.queue_ids))
    return place


def make_placer(strategy: str, opts: RunOptions, fixed: dict[str, str] | None = None):
    """Placement function plus a callback reporting its iteration count."""
    counter = {"n": 0}

    if strategy in ("maxz", "auto"):
        def place(inst):
            res = run_maxz(inst, tol=opts.tolerance, link_capacity=opts.link_capacity)
            counter["n"] += res.relaxation_solves
            return res.placement
    elif strategy == "greedy":
        place = greedy_place
    elif strategy == "affinity":
        place = affinity_place
    elif strategy == "brute":
        def place(inst):
            try:
                res = brute_force(inst, opts.time_budget, workers=opts.workers, link_capacity=opts.link_capacity)
            except BudgetExceeded as exc:
                if exc.best is None or exc.best.placement is None:
                    raise
                counter["n"] += exc.best.evaluated
                counter["budget"] = True
                return exc.best.placement
            counter["n"] += res.evaluated
            return res.placement
    elif strategy == "fixed":
        place = _fixed_placer(fixed)
    else:
        raise ValueError(f"unknown strategy '{strategy}'; expected one of {', '.join(STRATEGIES)}")
    return place, counter


def solve_instance(inst: ValidatedInstance, strategy: str, opts: RunOptions | None = None, *,
                   scenario_id: str = "", split=None, split_search=None, fixed=None) -> SolveReport:
    """Placement, allocation and delays for one instance; errors become the report status."""
    opts = opts or RunOptions()
    start = time.perf_counter()
    if opts.link_capacity is not None and opts.link_capacity != inst.enforce_link_capacity:
        # the command-line switch overrides the scenario option everywhere, allocation included
        inst = validate_instance(replace(inst.source, enforce_link_capacity=opts.link_capacity))
    report = SolveReport(scenario=scenario_id or inst.name, strategy=strategy, status="ok")
    try:
        place, counter = make_placer(strategy, opts, fixed)
        fast = strategy != "maxz"
        if inst.is_expanded():
            expanded = inst
            placement = place(expanded)
        elif split_search is not None:
            cfg = SplitSearchConfig(split_search.f0, split_search.delta0, split_search.epsilon)
            found = pattern_search_split(inst, None, cfg, place, fast_path=fast)
            report.split = found.fractions
            report.extra["split_evaluations"] = found.evaluations
            if found.best.placement is None:
                raise InfeasibleError(found.best.error or "no feasible split found")
            expanded = replicate_graph(inst, found.fractions).instance
            placement = found.best.placement
        else:
            rep: ReplicatedInstance = replicate_graph(inst, split)
            report.split = rep.fractions
            expanded = rep.instance
            placement = place(expanded)
        report.instance = expanded
        report.placement = placement
        report.allocation = allocate(expanded, placement, fast_path=fast, tol=min(opts.tolerance, 1e-9))
        report.iterations = counter["n"]
        if counter.get("budget"):
            report.status = "budget_exceeded"
            report.message = "time budget ran out; best placement found so far"
    except (InfeasibleError, UnstableQueue, BudgetExceeded) as exc:
        report.status = "infeasible"
        report.message = f"{type(exc).__name__}: {exc}"
    except Exception as exc:  # recorded per cell so sweeps continue
        report.status = "error"
        report.message = f"{type(exc).__name__}: {exc}"
    report.wall_time = time.perf_counter() - start
    return report


def run_solve(scenario: Scenario, strategy: str, opts: RunOptions | None = None) -> SolveReport:
    return solve_instance(scenario.instance, strategy, opts, scenario_id=scenario.id, split=scenario.split,
                          split_search=scenario.split_search, fixed=scenario.placement)


def _cell(args):
    scenario, value, strategy, opts = args
    inst = scenario.at(value)
    rep = solve_instance(inst, strategy, opts, scenario_id=scenario.id, split=scenario.split,
                         split_search=scenario.split_search, fixed=scenario.placement)
    if value is not None:
        rep.sweep_parameter, rep.sweep_value = scenario.sweep.parameter, value
    rep.instance = None  # keep the pickled payload small
    if rep.allocation is not None:
        rep.allocation.solver = None
    return rep


def run_sweep(scenario: Scenario, strategies: Sequence[str], opts: RunOptions | None = None) -> list[SolveReport]:
    """Every sweep value crossed with every strategy, in that row order."""
    opts = opts or RunOptions()
    values = list(scenario.sweep.values) if scenario.sweep else [None]
    cells = [(scenario, v, s, opts) for v in values for s in strategies]
    if opts.workers > 1 and len(cells) > 1:
        inner = RunOptions(opts.link_capacity, opts.tolerance, 1, opts.time_budget)
        with ProcessPoolExecutor(max_workers=opts.workers) as pool:
            return list(pool.map(_cell, [(sc, v, s, inner) for sc, v, s, _ in cells]))
    return [_cell(c) for c in cells]


def write_csv(reports: Sequence[SolveReport], out, timing: bool = False) -> None:
    cols = list(CSV_COLUMNS) + ([TIMING_COLUMN] if timing else [])
    w = csv.DictWriter(out, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row(timing))


def csv_text(reports: Sequence[SolveReport], timing: bool = False) -> str:
    buf = io.StringIO()
    write_csv(reports, buf, timing)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# simulation check


@dataclass
class ValidationRun:
    report: SolveReport
    sim: SimReport | None
    verdicts: list[Verdict]
    analytic: DelayBreakdown | None

    @property
    def passed(self) -> bool:
        return bool(self.verdicts) and all(v.passed for v in self.verdicts)

    @property
    def exit_code(self) -> int:
        if self.report.status not in ("ok", "budget_exceeded"):
            return self.report.exit_code
        return EXIT_OK if self.passed else EXIT_VALIDATION


def run_validate(scenario: Scenario, strategy: str, cfg: SimConfig | None = None, opts: RunOptions | None = None,
                 *, perturb: float = 0.0) -> ValidationRun:
    """Solve, simulate the result, and compare per-class delays with the analytic values.

    ``perturb`` scales the service rates used for the analytic side only
    (a debugging aid that should make the comparison fail).
    """
    report = run_solve(scenario, strategy, opts)
    if report.allocation is None:
        return ValidationRun(report, None, [], None)
    inst, placement = report.instance, report.placement
    sim = simulate(inst, placement, report.allocation.alloc, cfg or SimConfig())
    analytic = report.allocation.delays
    if perturb:
        mu = np.asarray(report.allocation.alloc.mu) * (1.0 + perturb)
        analytic = class_delays(inst, solve_traffic(inst), placement, CpuAllocation(mu))
    return ValidationRun(report, sim, compare_to_analytic(sim, analytic), analytic)
