"""Input-side domain types, instance validation and static derived quantities."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

ROW_SUM_TOL = 1e-9
ENTRY_SUM_TOL = 1e-9
ENTRY_CONSISTENCY_TOL = 1e-6
DEFAULT_STABILITY_MARGIN = 1e-6


@dataclass(frozen=True)
class Host:
    id: str
    kappa: float  # requests/ms


@dataclass(frozen=True)
class LinkMatrix:
    """Delay (ms) and capacity (requests/ms) for every ordered host pair.

    Unbounded links carry ``math.inf`` capacity.
    """

    delay: tuple[tuple[float, ...], ...]
    capacity: tuple[tuple[float, ...], ...]

    @classmethod
    def uniform(cls, n_hosts: int, delay: float, capacity: float = math.inf) -> "LinkMatrix":
        d = tuple(tuple(0.0 if h == l else float(delay) for l in range(n_hosts)) for h in range(n_hosts))
        c = tuple(tuple(float(capacity) for _ in range(n_hosts)) for _ in range(n_hosts))
        return cls(d, c)

    @classmethod
    def from_arrays(cls, delay, capacity=None) -> "LinkMatrix":
        delay = np.asarray(delay, dtype=float)
        if capacity is None:
            capacity = np.full(delay.shape, math.inf)
        capacity = np.asarray(capacity, dtype=float)
        return cls(tuple(map(tuple, delay.tolist())), tuple(map(tuple, capacity.tolist())))


@dataclass(frozen=True)
class VnfQueue:
    id: str
    instance_count: int = 1


@dataclass(frozen=True)
class ServiceClass:
    """One service (traffic class).

    ``transfer_prob[p][q]`` is the probability that a request leaving ``p``
    enters ``q`` next; whatever is missing from a row sum exits the system.
    ``entry_prob`` may be omitted, in which case it is derived from
    ``external_rate``.
    """

    id: str
    external_rate: Mapping[str, float]
    transfer_prob: Mapping[str, Mapping[str, float]]
    qos_delay: float  # ms; the same bound is called D_max in the full-load analysis
    entry_prob: Mapping[str, float] | None = None

    @property
    def max_delay(self) -> float:
        return self.qos_delay


@dataclass(frozen=True)
class ProblemInstance:
    hosts: Sequence[Host]
    links: LinkMatrix
    queues: Sequence[VnfQueue]
    classes: Sequence[ServiceClass]
    stability_margin: float = DEFAULT_STABILITY_MARGIN
    enforce_link_capacity: bool = False
    name: str = ""


class IssueKind(str, Enum):
    NON_STOCHASTIC_ROUTING = "NonStochasticRouting"
    ABSORBING_ROUTING = "AbsorbingRouting"
    NEGATIVE_PARAMETER = "NegativeParameter"
    DIMENSION_MISMATCH = "DimensionMismatch"
    INCONSISTENT_ENTRY = "InconsistentEntry"
    UNKNOWN_REFERENCE = "UnknownReference"


@dataclass(frozen=True)
class ValidationIssue:
    kind: IssueKind
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.kind.value} at {self.location}: {self.message}"


class InvalidInstance(ValueError):
    def __init__(self, issues: Sequence[ValidationIssue]):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


class InfeasibleError(RuntimeError):
    """No placement/allocation satisfies the capacity or stability constraints."""


class UnstableQueue(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ValidatedInstance:
    """Immutable, array-backed view of a checked :class:`ProblemInstance`.

    Indices: ``h`` over hosts, ``q`` over queues (VNF instances), ``k`` over
    classes. ``transfer[k, p, q]`` is P(q | p, k).
    """

    source: ProblemInstance
    host_ids: tuple[str, ...]
    queue_ids: tuple[str, ...]
    class_ids: tuple[str, ...]
    kappa: np.ndarray
    delay: np.ndarray
    capacity: np.ndarray
    ext_rate: np.ndarray
    entry_prob: np.ndarray
    transfer: np.ndarray
    qos: np.ndarray
    instance_count: np.ndarray
    spectral_radius: np.ndarray
    stability_margin: float
    enforce_link_capacity: bool

    def __post_init__(self):
        for name in ("kappa", "delay", "capacity", "ext_rate", "entry_prob", "transfer",
                     "qos", "instance_count", "spectral_radius"):
            getattr(self, name).setflags(write=False)

    @property
    def n_hosts(self) -> int:
        return len(self.host_ids)

    @property
    def n_queues(self) -> int:
        return len(self.queue_ids)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def name(self) -> str:
        return self.source.name

    def is_expanded(self) -> bool:
        return bool(np.all(self.instance_count == 1))

    def edges(self) -> list[tuple[int, int]]:
        """Ordered queue pairs (q, r), q != r, with positive transfer probability in some class."""
        mass = self.transfer.sum(axis=0)
        np.fill_diagonal(mass, 0.0)
        return [(int(q), int(r)) for q, r in zip(*np.nonzero(mass > 0))]

    def __eq__(self, other):
        if not isinstance(other, ValidatedInstance):
            return NotImplemented
        if (self.host_ids, self.queue_ids, self.class_ids) != (other.host_ids, other.queue_ids, other.class_ids):
            return False
        arrays = ("kappa", "delay", "capacity", "ext_rate", "entry_prob", "transfer", "qos", "instance_count")
        return (all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and self.stability_margin == other.stability_margin
                and self.enforce_link_capacity == other.enforce_link_capacity)

    __hash__ = None


@dataclass(frozen=True)
class Placement:
    """Host index for every VNF instance (the indicator form of A(h, q))."""

    host_of: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "host_of", tuple(int(h) for h in self.host_of))

    def matrix(self, n_hosts: int) -> np.ndarray:
        a = np.zeros((n_hosts, len(self.host_of)))
        a[list(self.host_of), range(len(self.host_of))] = 1.0
        return a

    def hosts_used(self) -> int:
        return len(set(self.host_of))

    def describe(self, inst: ValidatedInstance) -> str:
        return ",".join(f"{inst.queue_ids[q]}->{inst.host_ids[h]}" for q, h in enumerate(self.host_of))


@dataclass(frozen=True)
class CpuAllocation:
    mu: np.ndarray  # requests/ms per VNF instance

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)


def spectral_radius(matrix: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Dominant eigenvalue modulus of a nonnegative matrix by power iteration.

    The radius of a reducible matrix is the largest radius among its
    strongly connected diagonal blocks, so each block is iterated on its own.
    Shifting a block by the identity makes it primitive, which guarantees
    geometric convergence; Collatz-Wielandt bounds give the stopping rule.
    """
    m = np.asarray(matrix, dtype=float)
    if m.shape[0] == 0 or not m.any():
        return 0.0
    n_comp, labels = connected_components(csr_matrix(m > 0), directed=True, connection="strong")
    best = 0.0
    for c in range(n_comp):
        idx = np.flatnonzero(labels == c)
        block = m[np.ix_(idx, idx)]
        if len(idx) == 1:
            best = max(best, float(block[0, 0]))
        else:
            best = max(best, _primitive_radius(block + np.eye(len(idx)), tol, max_iter) - 1.0)
    return max(best, 0.0)


def _primitive_radius(shifted: np.ndarray, tol: float, max_iter: int) -> float:
    x = np.full(shifted.shape[0], 1.0 / shifted.shape[0])
    lo, hi = 0.0, math.inf
    for _ in range(max_iter):
        y = shifted @ x
        ratios = y / x
        lo, hi = ratios.min(), ratios.max()
        if hi - lo <= tol * hi:
            break
        x = y / y.sum()
    return float(0.5 * (lo + hi))


def _check_prob(value, location, issues):
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        issues.append(ValidationIssue(IssueKind.NEGATIVE_PARAMETER, location,
                                      f"probability {value} outside [0, 1]"))


def validate_instance(raw: ProblemInstance | ValidatedInstance) -> ValidatedInstance:
    """Check every invariant of ``raw`` and build the array view.

    Raises :class:`InvalidInstance` listing all violations found.
    """
    if isinstance(raw, ValidatedInstance):
        return raw
    issues: list[ValidationIssue] = []
    host_ids = tuple(h.id for h in raw.hosts)
    queue_ids = tuple(q.id for q in raw.queues)
    class_ids = tuple(k.id for k in raw.classes)
    n_h, n_q, n_k = len(host_ids), len(queue_ids), len(class_ids)

    for label, ids in (("hosts", host_ids), ("vnfs", queue_ids), ("classes", class_ids)):
        if len(set(ids)) != len(ids):
            issues.append(ValidationIssue(IssueKind.DIMENSION_MISMATCH, label, "duplicate identifiers"))
        if not ids:
            issues.append(ValidationIssue(IssueKind.DIMENSION_MISMATCH, label, "empty"))

    kappa = np.array([h.kappa for h in raw.hosts], dtype=float)
    for h in raw.hosts:
        if not h.kappa > 0:
            issues.append(ValidationIssue(IssueKind.NEGATIVE_PARAMETER, f"hosts[{h.id}].kappa",
                                          f"capacity must be positive, got {h.kappa}"))

    delay = np.array(raw.links.delay, dtype=float) if raw.links.delay else np.zeros((0, 0))
    capacity = np.array(raw.links.capacity, dtype=float) if raw.links.capacity else np.zeros((0, 0))
    if delay.shape != (n_h, n_h) or capacity.shape != (n_h, n_h):
        issues.append(ValidationIssue(IssueKind.DIMENSION_MISMATCH, "links",
                                      f"expected {n_h}x{n_h} matrices, got {delay.shape} and {capacity.shape}"))
        delay = np.zeros((n_h, n_h))
        capacity = np.full((n_h, n_h), math.inf)
    else:
        for h in range(n_h):
            if delay[h, h] != 0.0:
                issues.append(ValidationIssue(IssueKind.NEGATIVE_PARAMETER, f"links[{host_ids[h]},{host_ids[h]}]",
                                              "self delay must be 0"))
        bad = np.argwhere(~(delay >= 0))
        for h, l in bad:
            issues.append(ValidationIssue(IssueKind.NEGATIVE_PARAMETER, f"links[{host_ids[h]},{host_ids[l]}].delay",
                                          f"delay must be >= 0, got {delay[h, l]}"))
        bad = np.argwhere(~(capacity > 0))
        for h, l in bad:
            if h != l:
                issues.append(ValidationIssue(IssueKind.NEGATIVE_PARAMETER,
                                              f"links[{host_ids[h]},{host_ids[l]}].capacity",
                                              f"capacity must be > 0, got {capacity[h, l]}"))

    counts = np.array([q.instance_count for q in raw.queues], dtype=int)
    for q in raw.queues:
        if not (isinstance(q.instance_count, (int, np.integer)) and q.instance_count >= 1):
            issues.append(ValidationIssue(IssueKind.NEGATIVE_PARAMETER, f"vnfs[{q.id}].instance_count",
                                          f"must be a positive integer, got {q.instance_count}"))

    if not raw.stability_margin > 0:
        issues.append(ValidationIssue(IssueKind.NEGATIVE_PARAMETER, "stability_margin",
                                      f"must be positive, got {raw.stability_margin}"))

    q_index = {q: i for i, q in enumerate(queue_ids)}
    ext = np.zeros((n_k, n_q))
    entry = np.zeros((n_k, n_q))
    transfer = np.zeros((n_k, n_q, n_q))
    qos = np.zeros(n_k)
    radii = np.zeros(n_k)

    def lookup(qid, location):
        if qid not in q_index:
            issues.append(ValidationIssue(IssueKind.UNKNOWN_REFERENCE, location, f"unknown VNF '{qid}'"))
            return None
        return q_index[qid]

    for k, cls in enumerate(raw.classes):
        loc = f"classes[{cls.id}]"
        qos[k] = cls.qos_delay
        if not cls.qos_delay > 0:
            issues.append(ValidationIssue(IssueKind.NEGATIVE_PARAMETER, f"{loc}.qos_delay",
                                          f"must be positive, got {cls.qos_delay}"))
        for qid, rate in cls.external_rate.items():
            q = lookup(qid, f"{loc}.external_rate")
            if q is None:
                continue
            ext[k, q] = rate
            if not rate >= 0:
                issues.append(ValidationIssue(IssueKind.NEGATIVE_PARAMETER, f"{loc}.external_rate[{qid}]",
                                              f"rate must be >= 0, got {rate}"))
        total = ext[k].sum()
        if not total > 0:
            issues.append(ValidationIssue(IssueKind.NEGATIVE_PARAMETER, f"{loc}.external_rate",
                                          "at least one external rate must be positive"))
        if cls.entry_prob is None:
            if total > 0:
                entry[k] = ext[k] / total
        else:
            for qid, p in cls.entry_prob.items():
                q = lookup(qid, f"{loc}.entry_prob")
                if q is None:
                    continue
                _check_prob(p, f"{loc}.entry_prob[{qid}]", issues)
                entry[k, q] = p
            if abs(entry[k].sum() - 1.0) > ENTRY_SUM_TOL:
                issues.append(ValidationIssue(IssueKind.NON_STOCHASTIC_ROUTING, f"{loc}.entry_prob",
                                              f"entry probabilities sum to {entry[k].sum()}, expected 1"))
            elif total > 0 and np.max(np.abs(entry[k] - ext[k] / total)) > ENTRY_CONSISTENCY_TOL:
                issues.append(ValidationIssue(IssueKind.INCONSISTENT_ENTRY, f"{loc}.entry_prob",
                                              "entry probabilities disagree with normalised external rates"))
        for pid, row in cls.transfer_prob.items():
            p = lookup(pid, f"{loc}.transfer_prob")
            if p is None:
                continue
            for qid, prob in row.items():
                q = lookup(qid, f"{loc}.transfer_prob[{pid}]")
                if q is None:
                    continue
                _check_prob(prob, f"{loc}.transfer_prob[{pid}][{qid}]", issues)
                transfer[k, p, q] = prob
            s = transfer[k, p].sum()
            if s > 1.0 + ROW_SUM_TOL:
                issues.append(ValidationIssue(IssueKind.NON_STOCHASTIC_ROUTING, f"{loc}.transfer_prob[{pid}]",
                                              f"row sums to {s} > 1"))
        radii[k] = spectral_radius(np.clip(transfer[k], 0.0, None))
        if radii[k] >= 1.0 - 1e-12:
            issues.append(ValidationIssue(IssueKind.ABSORBING_ROUTING, f"{loc}.transfer_prob",
                                          f"routing spectral radius {radii[k]:.6g} >= 1; requests never exit"))

    if issues:
        raise InvalidInstance(issues)
    return ValidatedInstance(
        source=raw, host_ids=host_ids, queue_ids=queue_ids, class_ids=class_ids,
        kappa=kappa, delay=delay, capacity=capacity, ext_rate=ext, entry_prob=entry,
        transfer=transfer, qos=qos, instance_count=counts, spectral_radius=radii,
        stability_margin=float(raw.stability_margin), enforce_link_capacity=bool(raw.enforce_link_capacity),
    )


def host_loads(inst: ValidatedInstance, placement: Placement, big_lambda: np.ndarray) -> np.ndarray:
    loads = np.zeros(inst.n_hosts)
    np.add.at(loads, list(placement.host_of), big_lambda)
    return loads


def feasible_capacity_check(inst: ValidatedInstance, placement: Placement,
                            big_lambda: np.ndarray | None = None) -> bool:
    """True iff some allocation satisfies host capacity and strict stability.

    Each host needs sum of Lambda(q) plus one stability margin per co-located
    instance to fit within kappa_h.
    """
    if len(placement.host_of) != inst.n_queues:
        raise ValueError("placement does not cover every VNF instance")
    if big_lambda is None:
        from .traffic import solve_traffic
        big_lambda = solve_traffic(inst).big_lambda
    need = host_loads(inst, placement, big_lambda + inst.stability_margin)
    return bool(np.all(need <= inst.kappa))


def partial_capacity_ok(inst: ValidatedInstance, host_of: Mapping[int, int], big_lambda: np.ndarray) -> bool:
    """Capacity check restricted to the instances assigned so far."""
    need = np.zeros(inst.n_hosts)
    for q, h in host_of.items():
        need[h] += big_lambda[q] + inst.stability_margin
    return bool(np.all(need <= inst.kappa))
