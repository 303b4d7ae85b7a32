"""Reference placement strategies: exhaustive search, first-fit decreasing, affinity packing."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .allocation import AllocationResult, allocate
from .model import InfeasibleError, Placement, ValidatedInstance, feasible_capacity_check
from .traffic import TrafficSolution, link_flows, solve_traffic

ENUMERATION_CAP = 10**6


@dataclass
class BruteForceResult:
    placement: Placement | None
    allocation: AllocationResult | None
    objective: float
    enumerated: int
    evaluated: int
    complete: bool = True


class BudgetExceeded(RuntimeError):
    """Enumeration stopped early; ``best`` holds the best solution seen (possibly None)."""

    def __init__(self, message: str, best: BruteForceResult | None):
        super().__init__(message)
        self.best = best


def placement_count(inst: ValidatedInstance) -> int:
    return inst.n_hosts**inst.n_queues


def placement_at(index: int, n_hosts: int, n_queues: int) -> Placement:
    """Mixed-radix decoding; the first VNF is the least significant digit."""
    hosts = []
    for _ in range(n_queues):
        index, h = divmod(index, n_hosts)
        hosts.append(h)
    return Placement(tuple(hosts))


def _admissible(inst, traffic, placement, link_capacity) -> bool:
    if not feasible_capacity_check(inst, placement, traffic.big_lambda):
        return False
    return not link_capacity or link_flows(inst, traffic, placement).ok


def _scan(inst, traffic, start, stop, link_capacity, tol, deadline):
    best_idx, best_val, best_alloc = None, np.inf, None
    evaluated = 0
    for idx in range(start, stop):
        if deadline is not None and time.monotonic() > deadline:
            return best_idx, best_val, best_alloc, evaluated, idx - start, idx == stop
        placement = placement_at(idx, inst.n_hosts, inst.n_queues)
        if not _admissible(inst, traffic, placement, link_capacity):
            continue
        res = allocate(inst, placement, traffic, tol=tol)
        evaluated += 1
        if res.rho < best_val - 1e-12:
            best_idx, best_val, best_alloc = idx, res.rho, res
    return best_idx, best_val, best_alloc, evaluated, stop - start, True


def _scan_chunk(args):
    return _scan(*args)


def brute_force(inst: ValidatedInstance, time_budget: float | None = None, *, cap: int = ENUMERATION_CAP,
                workers: int = 1, traffic: TrafficSolution | None = None, link_capacity: bool | None = None,
                tol: float = 1e-7) -> BruteForceResult:
    """Optimal placement by enumerating every host assignment.

    Placements that overload a host (or a link, when link capacity is
    enforced) are skipped; the rest get an optimal CPU allocation. The first
    placement in enumeration order wins ties.
    """
    traffic = traffic or solve_traffic(inst)
    link_capacity = inst.enforce_link_capacity if link_capacity is None else link_capacity
    total = placement_count(inst)
    if total > cap:
        raise BudgetExceeded(f"{total} placements exceed the enumeration cap {cap}", None)
    deadline = None if time_budget is None else time.monotonic() + time_budget

    if workers > 1 and total > 1:
        bounds = np.linspace(0, total, min(workers * 4, total) + 1).astype(int)
        jobs = [(inst, traffic, int(a), int(b), link_capacity, tol, deadline) for a, b in zip(bounds, bounds[1:])]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_scan_chunk, jobs))
    else:
        parts = [_scan(inst, traffic, 0, total, link_capacity, tol, deadline)]

    best_idx, best_val, best_alloc = None, np.inf, None
    evaluated = enumerated = 0
    complete = True
    for idx, val, alloc, n_eval, n_seen, done in parts:
        evaluated += n_eval
        enumerated += n_seen
        complete &= done
        # chunks arrive in enumeration order, so strict improvement keeps the earliest
        if idx is not None and val < best_val - 1e-12:
            best_idx, best_val, best_alloc = idx, val, alloc
    placement = None if best_idx is None else placement_at(best_idx, inst.n_hosts, inst.n_queues)
    result = BruteForceResult(placement=placement, allocation=best_alloc, objective=float(best_val),
                              enumerated=enumerated, evaluated=evaluated, complete=complete)
    if not complete:
        raise BudgetExceeded(f"time budget of {time_budget}s ran out after {enumerated} of {total} placements",
                             result)
    if placement is None:
        raise InfeasibleError("no placement satisfies the capacity constraints")
    # polish the winner so comparisons against other strategies are not tolerance-limited
    tight = allocate(inst, placement, traffic, tol=min(tol, 1e-9))
    result.allocation, result.objective = tight, float(tight.rho)
    return result


def _fits(inst, load, h, extra) -> bool:
    return load[h] + extra <= inst.kappa[h]


def _need(inst, traffic, q) -> float:
    return traffic.big_lambda[q] + inst.stability_margin


def _load_order(inst, traffic) -> list[int]:
    # decreasing load, ties by VNF id
    return sorted(range(inst.n_queues), key=lambda q: (-traffic.big_lambda[q], inst.queue_ids[q]))


def _first_fit(inst, traffic, order, host_of, load, opened):
    for q in order:
        need = _need(inst, traffic, q)
        target = next((h for h in opened if _fits(inst, load, h, need)), None)
        if target is None:
            target = next((h for h in range(inst.n_hosts) if h not in opened and _fits(inst, load, h, need)), None)
            if target is None:
                raise InfeasibleError(f"VNF {inst.queue_ids[q]} (load {traffic.big_lambda[q]:.6g}) fits no host")
            opened.append(target)
        host_of[q] = target
        load[target] += need


def greedy_place(inst: ValidatedInstance, traffic: TrafficSolution | None = None) -> Placement:
    """First-fit decreasing by load; new hosts are opened in index order only when needed."""
    traffic = traffic or solve_traffic(inst)
    host_of: dict[int, int] = {}
    load = np.zeros(inst.n_hosts)
    _first_fit(inst, traffic, _load_order(inst, traffic), host_of, load, [])
    return Placement(tuple(host_of[q] for q in range(inst.n_queues)))


def affinity_weights(inst: ValidatedInstance, traffic: TrafficSolution) -> np.ndarray:
    """Symmetric rate-weighted transition mass between each pair of VNFs."""
    flow = np.einsum("kq,kqr->qr", traffic.lambda_hat, inst.transfer)
    w = flow + flow.T
    np.fill_diagonal(w, 0.0)
    return w


def affinity_place(inst: ValidatedInstance, traffic: TrafficSolution | None = None) -> Placement:
    """Co-locate the most strongly connected VNF pairs first; ignores link delays."""
    traffic = traffic or solve_traffic(inst)
    w = affinity_weights(inst, traffic)
    pairs = [(q, r) for q in range(inst.n_queues) for r in range(q + 1, inst.n_queues) if w[q, r] > 0]
    pairs.sort(key=lambda p: (-w[p], p))
    host_of: dict[int, int] = {}
    load = np.zeros(inst.n_hosts)
    opened: list[int] = []

    def put(q, h):
        host_of[q] = h
        load[h] += _need(inst, traffic, q)
        if h not in opened:
            opened.append(h)

    for q, r in pairs:
        if q in host_of and r in host_of:
            continue
        if q in host_of or r in host_of:
            placed, other = (q, r) if q in host_of else (r, q)
            h = host_of[placed]
            if _fits(inst, load, h, _need(inst, traffic, other)):
                put(other, h)
            continue
        need = _need(inst, traffic, q) + _need(inst, traffic, r)
        # least loaded host that takes both, lowest index on ties
        candidates = [h for h in range(inst.n_hosts) if _fits(inst, load, h, need)]
        if candidates:
            h = min(candidates, key=lambda h: (load[h], h))
            put(q, h)
            put(r, h)
    rest = [q for q in _load_order(inst, traffic) if q not in host_of]
    _first_fit(inst, traffic, rest, host_of, load, opened)
    return Placement(tuple(host_of[q] for q in range(inst.n_queues)))
