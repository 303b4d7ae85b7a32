"""CPU allocation for a fixed placement.

Two routes produce the optimal service rates: the barrier solve of the
min-max program, and (when every class is provably critical) a Newton solve
of the full-load equality system. The dispatcher tries the fast route first
and verifies it against the KKT conditions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import convex
from .model import CpuAllocation, InfeasibleError, Placement, ValidatedInstance, feasible_capacity_check
from .traffic import DelayBreakdown, TrafficSolution, class_delays, link_flows, solve_traffic, _network_term_distinct

log = logging.getLogger(__name__)

KKT_TOL = 1e-6


class InfeasiblePlacement(InfeasibleError):
    pass


class LinkCapacityViolated(InfeasibleError):
    pass


class NewtonDiverged(RuntimeError):
    pass


class PreconditionViolated(ValueError):
    pass


@dataclass
class KktCertificate:
    m_queue: np.ndarray  # multipliers of the stability constraints
    m_host: np.ndarray  # multipliers of the host-capacity constraints (0 for unused hosts)
    m_class: np.ndarray  # multipliers of the per-class delay constraints
    rho: float
    sum_class: float  # |1 - sum M_k|
    stationarity: float  # max |dL/dmu(q)|
    slack_queue: float  # max |M_q X_q|
    slack_host: float  # max |M_h Y_h|
    slack_class: float  # max |M_k W_k|

    def max_residual(self) -> float:
        return max(self.sum_class, self.stationarity, self.slack_queue, self.slack_host, self.slack_class)

    def min_multiplier(self) -> float:
        return float(min(self.m_queue.min(initial=0.0), self.m_host.min(initial=0.0), self.m_class.min(initial=0.0)))


@dataclass
class AllocationResult:
    alloc: CpuAllocation
    rho: float
    certificate: KktCertificate
    delays: DelayBreakdown
    method: str  # "barrier" or "full-load"
    iterations: int = 0
    solver: convex.SolverResult | None = field(default=None, repr=False)


def _class_network(inst: ValidatedInstance, traffic: TrafficSolution, placement: Placement) -> np.ndarray:
    return _network_term_distinct(inst, traffic, placement)


def allocation_program(inst: ValidatedInstance, traffic: TrafficSolution, placement: Placement) -> convex.ConvexProgram:
    """Min-max delay-ratio program in variables (mu_0 .. mu_{Q-1}, rho)."""
    n_q = inst.n_queues
    lam = traffic.big_lambda
    margin = inst.stability_margin
    net = _class_network(inst, traffic, placement)
    hosts = np.asarray(placement.host_of)
    used = sorted(set(placement.host_of))
    rows, cols = [], []
    for i, h in enumerate(used):
        qs = np.flatnonzero(hosts == h)
        rows.extend([i] * qs.size)
        cols.extend(qs.tolist())
    G = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(used), n_q + 1))
    cap = inst.kappa[used]

    nonlinear = []
    for k in range(inst.n_classes):
        qs = np.flatnonzero(traffic.gamma[k] > 0)
        nonlinear.append(convex.ReciprocalAffine(
            lin_idx=np.array([n_q]), lin_coef=np.array([-1.0]), const=net[k] / inst.qos[k],
            rec_idx=qs, rec_shift=lam[qs], rec_weight=traffic.gamma[k, qs] / inst.qos[k]))

    lb = np.append(lam + margin, -np.inf)
    ub = np.full(n_q + 1, np.inf)
    mu0 = _initial_mu(inst, traffic, placement, share=0.5)
    x0 = np.append(mu0, 0.0)
    x0[n_q] = max(f.value(x0) for f in nonlinear) + 1.0 if nonlinear else 0.0
    return convex.ConvexProgram(n=n_q + 1, objective=convex.ReciprocalAffine.linear([n_q], [1.0]),
                                lb=lb, ub=ub, G=G, h=cap, nonlinear=nonlinear, x0=x0)


def _initial_mu(inst, traffic, placement, share=1.0):
    """Lambda + margin plus a share of each host's slack, split by sqrt of delay weight."""
    lam = traffic.big_lambda + inst.stability_margin
    weight = np.sqrt((traffic.gamma / inst.qos[:, None]).sum(axis=0)) + 1e-9
    mu = lam.copy()
    hosts = np.asarray(placement.host_of)
    for h in set(placement.host_of):
        qs = np.flatnonzero(hosts == h)
        slack = inst.kappa[h] - lam[qs].sum()
        mu[qs] += share * max(slack, 0.0) * weight[qs] / weight[qs].sum()
    return mu


def _certificate(inst, traffic, placement, mu, rho, m_queue, m_host, m_class) -> KktCertificate:
    lam = traffic.big_lambda
    hosts = np.asarray(placement.host_of)
    gap = mu - lam
    net = _class_network(inst, traffic, placement)
    x_q = lam - mu
    y_h = np.array([mu[hosts == h].sum() - inst.kappa[h] for h in range(inst.n_hosts)])
    w_k = (traffic.gamma @ (1.0 / gap) + net) / inst.qos - rho
    grad_mu = (-m_queue + m_host[hosts]
               - (m_class[:, None] * traffic.gamma / inst.qos[:, None]).sum(axis=0) / gap**2)
    used = np.zeros(inst.n_hosts, dtype=bool)
    used[hosts] = True
    return KktCertificate(
        m_queue=m_queue, m_host=m_host, m_class=m_class, rho=float(rho),
        sum_class=float(abs(1.0 - m_class.sum())),
        stationarity=float(np.max(np.abs(grad_mu))),
        slack_queue=float(np.max(np.abs(m_queue * x_q))),
        slack_host=float(np.max(np.abs(m_host[used] * y_h[used]))),
        slack_class=float(np.max(np.abs(m_class * w_k))),
    )


def _check_preconditions(inst, traffic, placement):
    if not feasible_capacity_check(inst, placement, traffic.big_lambda):
        raise InfeasiblePlacement("placement overloads at least one host")
    if inst.enforce_link_capacity:
        flows = link_flows(inst, traffic, placement)
        if not flows.ok:
            h, l, f, c = flows.violations[0]
            raise LinkCapacityViolated(
                f"link {inst.host_ids[h]}->{inst.host_ids[l]} carries {f:.6g} > capacity {c:.6g}")


def optimize_allocation(inst: ValidatedInstance, placement: Placement, traffic: TrafficSolution | None = None,
                        tol: float = 1e-9) -> AllocationResult:
    """Optimal service rates for ``placement`` by the barrier method, with KKT certificate."""
    traffic = traffic or solve_traffic(inst)
    _check_preconditions(inst, traffic, placement)
    prog = allocation_program(inst, traffic, placement)
    try:
        res = convex.solve(prog, tol=tol)
    except convex.Infeasible as exc:
        raise InfeasiblePlacement(str(exc)) from exc
    except convex.IterationLimit as exc:
        # a stall just above a very tight request is still a valid certificate
        if exc.result is None or exc.result.kkt.max() > KKT_TOL:
            raise
        log.debug("allocation solve stalled at KKT residual %.3g; accepting", exc.result.kkt.max())
        res = exc.result
    n_q = inst.n_queues
    mu, rho = res.x[:n_q], float(res.x[n_q])
    used = sorted(set(placement.host_of))
    m_host = np.zeros(inst.n_hosts)
    m_host[used] = res.duals.linear
    cert = _certificate(inst, traffic, placement, mu, rho, res.duals.lower[:n_q], m_host, res.duals.nonlinear)
    alloc = CpuAllocation(mu)
    delays = class_delays(inst, traffic, placement, alloc)
    return AllocationResult(alloc=alloc, rho=rho, certificate=cert, delays=delays, method="barrier",
                            iterations=res.newton_steps, solver=res)


# ---------------------------------------------------------------------------
# criticality graph


@dataclass(frozen=True)
class CriticalityGraph:
    """Directed graph over hosts, queues and classes.

    Vertices are ``("host", h)`` for every host carrying a VNF, then
    ``("queue", q)`` and ``("class", k)``; ``edges`` maps each vertex index to
    its sorted successors. Empty hosts impose no constraint and are left out.
    """

    vertices: tuple[tuple[str, int], ...]
    edges: tuple[tuple[int, ...], ...]

    def index(self, kind: str, i: int) -> int:
        return self.vertices.index((kind, i))

    def edge_set(self) -> set[tuple[tuple[str, int], tuple[str, int]]]:
        return {(self.vertices[u], self.vertices[v]) for u, succ in enumerate(self.edges) for v in succ}


def build_criticality_graph(inst: ValidatedInstance, placement: Placement,
                            traffic: TrafficSolution | None = None) -> CriticalityGraph:
    traffic = traffic or solve_traffic(inst)
    n_q, n_k = inst.n_queues, inst.n_classes
    used = sorted(set(placement.host_of))
    n_h = len(used)
    vertices = ([("host", h) for h in used] + [("queue", q) for q in range(n_q)]
                + [("class", k) for k in range(n_k)])
    slot = {h: i for i, h in enumerate(used)}
    host_v = lambda h: slot[h]
    queue_v = lambda q: n_h + q
    class_v = lambda k: n_h + n_q + k
    succ: list[set[int]] = [set() for _ in vertices]
    for q, h in enumerate(placement.host_of):
        succ[host_v(h)].add(queue_v(q))
        succ[queue_v(q)].add(host_v(h))
    users = traffic.gamma > 0
    for q in range(n_q):
        ks = np.flatnonzero(users[:, q])
        for k in ks:
            succ[class_v(k)].add(queue_v(q))
        if ks.size == 1:
            succ[queue_v(q)].add(class_v(int(ks[0])))
    return CriticalityGraph(vertices=tuple(vertices), edges=tuple(tuple(sorted(s)) for s in succ))


def strongly_connected_components(edges) -> list[list[int]]:
    """Tarjan's algorithm, iterative; components in reverse topological order."""
    n = len(edges)
    index = [-1] * n
    low = [0] * n
    on_stack = [False] * n
    stack: list[int] = []
    comps: list[list[int]] = []
    counter = 0
    for root in range(n):
        if index[root] != -1:
            continue
        work = [(root, 0)]
        while work:
            v, i = work.pop()
            if i == 0:
                index[v] = low[v] = counter
                counter += 1
                stack.append(v)
                on_stack[v] = True
            recurse = False
            succ = edges[v]
            while i < len(succ):
                w = succ[i]
                i += 1
                if index[w] == -1:
                    work.append((v, i))
                    work.append((w, 0))
                    recurse = True
                    break
                if on_stack[w]:
                    low[v] = min(low[v], index[w])
            if recurse:
                continue
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack[w] = False
                    comp.append(w)
                    if w == v:
                        break
                comps.append(sorted(comp))
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
    return comps


def is_strongly_connected(graph: CriticalityGraph) -> bool:
    if not graph.vertices:
        return True
    return len(strongly_connected_components(graph.edges)) == 1


# ---------------------------------------------------------------------------
# full-load fast path


@dataclass
class _FullLoadLayout:
    n_q: int
    n_h: int  # hosts in use
    n_k: int
    local_host: np.ndarray  # [q] position of the VNF's host among the used hosts
    kappa: np.ndarray  # capacity of each used host

    def split(self, z):
        q, h, k = self.n_q, self.n_h, self.n_k
        return z[:q], z[q], z[q + 1:q + 1 + h], z[q + 1 + h:q + 1 + h + k]


def _full_load_residual(inst, traffic, placement, net, lay: _FullLoadLayout, z):
    mu, rho, m_h, m_k = lay.split(z)
    lam = traffic.big_lambda
    hosts = lay.local_host
    gap = mu - lam
    wq = traffic.gamma / inst.qos[:, None]  # [k, q]
    w = wq @ (1.0 / gap) + net / inst.qos - rho
    y = np.bincount(hosts, mu, minlength=lay.n_h) - lay.kappa
    s_rho = 1.0 - m_k.sum()
    s_mu = m_h[hosts] - (m_k @ wq) / gap**2
    return np.concatenate([w, y, [s_rho], s_mu])


def _full_load_jacobian(inst, traffic, placement, lay: _FullLoadLayout, z):
    mu, rho, m_h, m_k = lay.split(z)
    n_q, n_h, n_k = lay.n_q, lay.n_h, lay.n_k
    lam = traffic.big_lambda
    hosts = lay.local_host
    gap = mu - lam
    wq = traffic.gamma / inst.qos[:, None]
    n = n_q + 1 + n_h + n_k
    J = np.zeros((n_k + n_h + 1 + n_q, n))
    # W_k
    J[:n_k, :n_q] = -wq / gap**2
    J[:n_k, n_q] = -1.0
    # Y_h
    for q, h in enumerate(hosts):
        J[n_k + h, q] = 1.0
    # 1 - sum M_k
    J[n_k + n_h, n_q + 1 + n_h:] = -1.0
    # stationarity in mu
    r0 = n_k + n_h + 1
    J[r0 + np.arange(n_q), np.arange(n_q)] = 2.0 * (m_k @ wq) / gap**3
    J[r0 + np.arange(n_q), n_q + 1 + hosts] = 1.0
    J[r0:, n_q + 1 + n_h:] = -(wq / gap**2).T
    return J


def full_load_solve(inst: ValidatedInstance, placement: Placement, traffic: TrafficSolution | None = None,
                    *, max_steps: int = 100, max_halvings: int = 50, tol: float = 1e-12):
    """Solve the all-critical, all-strained equality system by damped Newton.

    The system couples W_k = 0 and Y_h = 0 with the stationarity conditions,
    giving one equation per unknown (mu, rho, M_h, M_k). Returns the
    allocation, rho and the multipliers.
    """
    traffic = traffic or solve_traffic(inst)
    graph = build_criticality_graph(inst, placement, traffic)
    if not is_strongly_connected(graph):
        raise PreconditionViolated("criticality graph is not strongly connected")
    idle = np.flatnonzero(~(traffic.gamma > 0).any(axis=0))
    if idle.size:
        # an idle VNF sits at its stability bound, so its host cannot be balanced by the equalities
        raise PreconditionViolated(f"VNF {inst.queue_ids[idle[0]]} carries no traffic")
    _check_preconditions(inst, traffic, placement)
    used = sorted(set(placement.host_of))
    hosts = np.array([used.index(h) for h in placement.host_of])
    lay = _FullLoadLayout(inst.n_queues, len(used), inst.n_classes, hosts, inst.kappa[used])
    net = _class_network(inst, traffic, placement)
    lam = traffic.big_lambda

    mu = _initial_mu(inst, traffic, placement, share=1.0)
    gap = mu - lam
    wq = traffic.gamma / inst.qos[:, None]
    ratios = wq @ (1.0 / gap) + net / inst.qos
    m_k = np.full(lay.n_k, 1.0 / lay.n_k)
    per_q = (m_k @ wq) / gap**2
    m_h = np.array([per_q[hosts == h].mean() for h in range(lay.n_h)])
    z = np.concatenate([mu, [ratios.max()], m_h, m_k])

    def norm(v):
        return float(np.linalg.norm(v))

    F = _full_load_residual(inst, traffic, placement, net, lay, z)
    steps = 0
    for steps in range(1, max_steps + 1):
        if norm(F) <= tol * (1.0 + norm(z)):
            break
        J = _full_load_jacobian(inst, traffic, placement, lay, z)
        try:
            dz = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise NewtonDiverged(f"singular Jacobian: {exc}") from exc
        step = 1.0
        for _ in range(max_halvings):
            cand = z + step * dz
            if np.all(cand[:lay.n_q] > lam):
                F_c = _full_load_residual(inst, traffic, placement, net, lay, cand)
                if norm(F_c) < norm(F):
                    break
            step *= 0.5
        else:
            raise NewtonDiverged("residual could not be reduced along the Newton direction")
        z, F = cand, F_c
    else:
        if norm(F) > tol * (1.0 + norm(z)) * 1e3:
            raise NewtonDiverged(f"no convergence after {max_steps} steps (residual {norm(F):.3g})")
    mu, rho, m_used, m_k = lay.split(z)
    if m_k.min() < -1e-9 or m_used.min() < -1e-9:
        raise NewtonDiverged("converged to a point with negative multipliers")
    m_h = np.zeros(inst.n_hosts)
    m_h[used] = m_used
    return FullLoadSolution(alloc=CpuAllocation(mu.copy()), rho=float(rho), m_host=m_h,
                            m_class=m_k.copy(), steps=steps)


@dataclass
class FullLoadSolution:
    alloc: CpuAllocation
    rho: float
    m_host: np.ndarray
    m_class: np.ndarray
    steps: int


def allocate(inst: ValidatedInstance, placement: Placement, traffic: TrafficSolution | None = None,
             *, fast_path: bool = True, tol: float = 1e-9) -> AllocationResult:
    """Dispatcher: full-load Newton when its precondition holds and verifies, else barrier."""
    traffic = traffic or solve_traffic(inst)
    if fast_path:
        graph = build_criticality_graph(inst, placement, traffic)
        if is_strongly_connected(graph):
            try:
                sol = full_load_solve(inst, placement, traffic)
            except (NewtonDiverged, PreconditionViolated) as exc:
                log.debug("full-load path failed (%s); falling back to barrier", exc)
            else:
                cert = _certificate(inst, traffic, placement, sol.alloc.mu, sol.rho,
                                    np.zeros(inst.n_queues), sol.m_host, sol.m_class)
                if cert.max_residual() <= KKT_TOL and cert.min_multiplier() >= -1e-9:
                    delays = class_delays(inst, traffic, placement, sol.alloc)
                    return AllocationResult(alloc=sol.alloc, rho=sol.rho, certificate=cert, delays=delays,
                                            method="full-load", iterations=sol.steps)
                log.debug("full-load solution failed KKT verification; falling back to barrier")
    return optimize_allocation(inst, placement, traffic, tol=tol)


# ---------------------------------------------------------------------------
# structural checks at an optimum


@dataclass
class OptimumChecks:
    critical_exists: bool
    critical_hosts_strained: bool
    strained_queues_serve_critical: bool
    critical: np.ndarray
    strained: np.ndarray


def optimum_checks(inst: ValidatedInstance, placement: Placement, traffic: TrafficSolution,
                   result: AllocationResult, tol: float = 1e-6) -> OptimumChecks:
    """At least one critical class; critical classes only cross strained hosts;
    every queue on a strained host serves a critical class.

    Idle queues (no class visits them) are left out of the last check: they
    sit at their stability bound and serve nobody.
    """
    ratio = result.delays.ratio
    rho = result.rho
    critical = np.abs(ratio - rho) <= tol * max(1.0, abs(rho))
    hosts = np.asarray(placement.host_of)
    load = np.array([result.alloc.mu[hosts == h].sum() for h in range(inst.n_hosts)])
    used = np.array([np.any(hosts == h) for h in range(inst.n_hosts)])
    strained = used & (np.abs(load - inst.kappa) <= tol * np.maximum(1.0, inst.kappa))
    users = traffic.gamma > 0
    prop3 = True
    for k in np.flatnonzero(critical):
        for q in np.flatnonzero(users[k]):
            prop3 &= bool(strained[hosts[q]])
    prop4 = True
    for q in range(inst.n_queues):
        if strained[hosts[q]] and users[:, q].any():
            prop4 &= bool(np.any(users[:, q] & critical))
    return OptimumChecks(critical_exists=bool(critical.any()), critical_hosts_strained=prop3,
                         strained_queues_serve_critical=prop4, critical=critical, strained=strained)
