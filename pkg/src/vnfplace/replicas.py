"""VNFs with several instances: graph expansion and split-fraction search."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .allocation import AllocationResult, allocate
from .model import (InfeasibleError, Placement, ServiceClass, UnstableQueue, ValidatedInstance,
                    VnfQueue, validate_instance)

log = logging.getLogger(__name__)

FRACTION_TOL = 1e-9
IMPROVEMENT_TOL = 1e-9

Fractions = Mapping[str, Sequence[float]]
Placer = Callable[[ValidatedInstance], Placement]


class BadFractions(ValueError):
    pass


@dataclass(frozen=True)
class SplitSearchConfig:
    f0: float = 0.5
    delta0: float = 0.25
    epsilon: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.f0 <= 1.0:
            raise ValueError(f"f0 must lie in [0, 1], got {self.f0}")
        if not 0.0 < self.epsilon < self.delta0:
            raise ValueError(f"need 0 < epsilon < delta0, got epsilon={self.epsilon}, delta0={self.delta0}")

    @property
    def max_halvings(self) -> int:
        return math.ceil(math.log2(self.delta0 / self.epsilon))


@dataclass(frozen=True)
class ReplicatedInstance:
    instance: ValidatedInstance
    origin: tuple[int, ...]  # expanded queue -> original queue index
    replica: tuple[int, ...]  # expanded queue -> replica number (0-based)
    fractions: dict[str, tuple[float, ...]]

    def replicas_of(self, q: int) -> list[int]:
        return [i for i, o in enumerate(self.origin) if o == q]


def replica_id(vnf_id: str, i: int) -> str:
    return f"{vnf_id}#{i + 1}"


def default_fractions(inst: ValidatedInstance) -> dict[str, tuple[float, ...]]:
    """Even split for every VNF with more than one instance."""
    return {qid: (1.0 / n,) * n for qid, n in zip(inst.queue_ids, inst.instance_count) if n > 1}


def _check_fractions(inst: ValidatedInstance, fractions: Fractions) -> dict[str, tuple[float, ...]]:
    out = {}
    counts = dict(zip(inst.queue_ids, inst.instance_count))
    for qid in fractions:
        if qid not in counts:
            raise BadFractions(f"fractions given for unknown VNF '{qid}'")
    for qid, n in counts.items():
        if n == 1:
            if qid in fractions and tuple(fractions[qid]) != (1.0,):
                raise BadFractions(f"VNF '{qid}' has a single instance")
            continue
        if qid not in fractions:
            raise BadFractions(f"no split fractions for VNF '{qid}' with {n} instances")
        f = tuple(float(x) for x in fractions[qid])
        if len(f) != n:
            raise BadFractions(f"VNF '{qid}': expected {n} fractions, got {len(f)}")
        if any(not x >= 0 for x in f):
            raise BadFractions(f"VNF '{qid}': negative fraction in {f}")
        if abs(sum(f) - 1.0) > FRACTION_TOL:
            raise BadFractions(f"VNF '{qid}': fractions sum to {sum(f)}, expected 1")
        out[qid] = f
    return out


def replicate_graph(inst: ValidatedInstance, fractions: Fractions | None = None) -> ReplicatedInstance:
    """Replace each multi-instance VNF by one queue per instance.

    Replica ``i`` of ``q`` receives share ``f[q][i]`` of every transition into
    ``q`` and of its external traffic; its outgoing routing is a copy of the
    original row (again split over the successors' replicas).
    """
    if fractions is None:
        fractions = default_fractions(inst)
    fr = _check_fractions(inst, fractions)
    origin, rep, ids = [], [], []
    for q, (qid, n) in enumerate(zip(inst.queue_ids, inst.instance_count)):
        for i in range(n):
            origin.append(q)
            rep.append(i)
            ids.append(qid if n == 1 else replica_id(qid, i))
    share = np.array([fr[inst.queue_ids[o]][i] if inst.instance_count[o] > 1 else 1.0
                      for o, i in zip(origin, rep)])
    org = np.array(origin)

    classes = []
    for k, cid in enumerate(inst.class_ids):
        ext = inst.ext_rate[k][org] * share
        entry = inst.entry_prob[k][org] * share
        trans = inst.transfer[k][np.ix_(org, org)] * share[None, :]
        classes.append(ServiceClass(
            id=cid,
            external_rate={ids[i]: float(ext[i]) for i in np.nonzero(ext)[0]},
            entry_prob={ids[i]: float(entry[i]) for i in np.nonzero(entry)[0]},
            transfer_prob={ids[p]: {ids[r]: float(trans[p, r]) for r in np.nonzero(trans[p])[0]}
                           for p in range(len(ids)) if trans[p].any()},
            qos_delay=float(inst.qos[k]),
        ))
    raw = inst.source
    expanded = replace(raw, queues=[VnfQueue(i) for i in ids], classes=classes)
    return ReplicatedInstance(validate_instance(expanded), tuple(origin), tuple(rep), fr)


# ---------------------------------------------------------------------------
# split search


@dataclass
class SplitEvaluation:
    fractions: dict[str, tuple[float, ...]]
    objective: float
    placement: Placement | None = None
    allocation: AllocationResult | None = None
    error: str | None = None


@dataclass
class SplitSearchResult:
    fractions: dict[str, tuple[float, ...]]
    best: SplitEvaluation
    evaluations: int
    halvings: int
    iterations: int
    trace: list[tuple[dict[str, tuple[float, ...]], float, float]] = field(default_factory=list)  # (f, objective, step)

    @property
    def f(self) -> float:
        """First-replica share of the (single) searched VNF."""
        (frac,) = self.fractions.values()
        return frac[0]

    @property
    def objective(self) -> float:
        return self.best.objective


def evaluate_split(inst: ValidatedInstance, fractions: Fractions, placer: Placer, *,
                   fast_path: bool = True) -> SplitEvaluation:
    """Expand, place, allocate. Infeasible candidates score +inf."""
    fr = {k: tuple(v) for k, v in fractions.items()}
    try:
        rep = replicate_graph(inst, fr)
        placement = placer(rep.instance)
        res = allocate(rep.instance, placement, fast_path=fast_path)
    except (InfeasibleError, UnstableQueue) as exc:
        return SplitEvaluation(fr, math.inf, error=str(exc))
    return SplitEvaluation(fr, float(res.rho), placement, res)


def _renormalise(frac: tuple[float, ...], i: int, value: float) -> tuple[float, ...]:
    # set coordinate i, rescale the others to keep the sum at one
    value = min(max(value, 0.0), 1.0)
    rest = [x for j, x in enumerate(frac) if j != i]
    total = sum(rest)
    if total > 0:
        rest = [x * (1.0 - value) / total for x in rest]
    else:
        rest = [(1.0 - value) / len(rest)] * len(rest)
    rest.insert(i, value)
    return tuple(rest)


def _key(fr: Mapping[str, tuple[float, ...]]):
    return tuple(sorted((k, tuple(round(x, 12) for x in v)) for k, v in fr.items()))


def pattern_search_split(inst: ValidatedInstance, replicated_vnf: str | Sequence[str] | None = None,
                         cfg: SplitSearchConfig | None = None, placer: Placer | None = None, *,
                         fast_path: bool = True) -> SplitSearchResult:
    """Derivative-free search over split fractions.

    With one two-instance VNF this is the textbook 1-D pattern search:
    try ``f + step`` and ``f - step`` (clamped to [0, 1]), move to a strictly
    better neighbour, otherwise halve the step; stop once it drops below
    ``epsilon``. With more replicas or several replicated VNFs the same moves
    are applied coordinate-wise, renormalising the other shares of that VNF.
    """
    cfg = cfg or SplitSearchConfig()
    if placer is None:
        from .maxz import run_maxz
        placer = lambda e: run_maxz(e).placement  # noqa: E731
    multi = [qid for qid, n in zip(inst.queue_ids, inst.instance_count) if n > 1]
    if replicated_vnf is None:
        targets = multi
    else:
        targets = [replicated_vnf] if isinstance(replicated_vnf, str) else list(replicated_vnf)
    if not targets:
        raise ValueError("no VNF with more than one instance to split")
    for t in targets:
        if t not in multi:
            raise ValueError(f"VNF '{t}' does not have several instances")

    current = default_fractions(inst)
    for t in targets:
        n = len(current[t])
        current[t] = (cfg.f0, 1.0 - cfg.f0) if n == 2 else _renormalise(current[t], 0, cfg.f0)

    cache: dict = {}

    def score(fr):
        key = _key(fr)
        if key not in cache:
            cache[key] = evaluate_split(inst, fr, placer, fast_path=fast_path)
        return cache[key]

    best = score(current)
    step = cfg.delta0
    halvings = iterations = 0
    trace = [(dict(current), best.objective, step)]
    while step >= cfg.epsilon:
        iterations += 1
        candidates = []
        for t in targets:
            coords = [0] if len(current[t]) == 2 else range(len(current[t]))
            for i in coords:
                for sign in (1.0, -1.0):
                    moved = _renormalise(current[t], i, current[t][i] + sign * step)
                    if moved != current[t]:
                        candidates.append({**current, t: moved})
        # strict improvement; first candidate wins ties
        winner = None
        for cand in candidates:
            ev = score(cand)
            if ev.objective < (winner or best).objective - IMPROVEMENT_TOL:
                winner = ev
        if winner is not None:
            best, current = winner, dict(winner.fractions)
        else:
            step /= 2.0
            halvings += 1
        trace.append((dict(current), best.objective, step))
    log.debug("split search: %d evaluations, %d halvings", len(cache), halvings)
    return SplitSearchResult(fractions=dict(current), best=best, evaluations=len(cache), halvings=halvings,
                             iterations=iterations, trace=trace)
