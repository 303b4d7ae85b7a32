"""MaxZ placement: relax, score, fix the most confident assignment, repeat."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from . import convex
from .model import InfeasibleError, Placement, ValidatedInstance, partial_capacity_ok
from .traffic import TrafficSolution, solve_traffic

log = logging.getLogger(__name__)

PSI_THRESHOLD_TOL = 1e-9
Z_TIE_TOL = 1e-5
RELAXATION_SLACK = 100.0


@dataclass
class RelaxedSolution:
    a_tilde: np.ndarray  # [h, q]
    psi: np.ndarray  # [h, q]
    phi: dict  # (h, l, q, r) -> value, for h != l and routed pairs (q, r)
    mu: np.ndarray
    rho: float
    solver: convex.SolverResult | None = field(default=None, repr=False)

    @property
    def lower_bound(self) -> float:
        """rho less the solver's duality-gap bound: a certified lower bound on the relaxed optimum."""
        return self.rho - (self.solver.gap if self.solver is not None else 0.0)


@dataclass
class ZScoreTable:
    z: np.ndarray  # [h, q]
    mask: np.ndarray  # [h, q] True where the VNF is already placed

    def ranked(self) -> list[tuple[int, int]]:
        """Unmasked (h, q) pairs, best first; near-equal scores ordered by host then VNF index."""
        pairs = [(h, q) for h in range(self.z.shape[0]) for q in range(self.z.shape[1]) if not self.mask[h, q]]
        rest = sorted(pairs, key=lambda hq: -self.z[hq])
        out = []
        while rest:
            top = self.z[rest[0]]
            group = [p for p in rest if self.z[p] >= top - Z_TIE_TOL]
            out.extend(sorted(group))
            rest = [p for p in rest if self.z[p] < top - Z_TIE_TOL]
        return out


class _Vars:
    def __init__(self):
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.x0: list[float] = []

    def add(self, name, lb=-np.inf, ub=np.inf, x0=0.0) -> int:
        self.names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        self.x0.append(x0)
        return len(self.names) - 1

    def __len__(self):
        return len(self.names)


class _Rows:
    def __init__(self):
        self.rows, self.cols, self.vals, self.rhs = [], [], [], []

    def add(self, terms: Mapping[int, float], rhs: float):
        i = len(self.rhs)
        for j, v in terms.items():
            if v != 0.0:
                self.rows.append(i)
                self.cols.append(j)
                self.vals.append(v)
        self.rhs.append(rhs)

    def matrix(self, n):
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(len(self.rhs), n)), np.array(self.rhs)


@dataclass
class Relaxation:
    program: convex.ConvexProgram
    a_expr: dict  # (h, q) -> ("var", idx) | ("const", value)
    psi_expr: dict
    phi_expr: dict  # (h, l, q, r) -> list of (idx, coef) plus const
    mu_idx: np.ndarray
    rho_idx: int
    n_hosts: int
    n_queues: int

    def decode(self, res: convex.SolverResult) -> RelaxedSolution:
        x = res.x

        def ev(expr):
            kind, v = expr
            return x[v] if kind == "var" else v

        a = np.zeros((self.n_hosts, self.n_queues))
        psi = np.zeros_like(a)
        for (h, q), e in self.a_expr.items():
            a[h, q] = ev(e)
        for (h, q), e in self.psi_expr.items():
            psi[h, q] = ev(e)
        phi = {key: ev(e) for key, e in self.phi_expr.items()}
        return RelaxedSolution(a_tilde=a, psi=psi, phi=phi, mu=x[self.mu_idx].copy(), rho=float(x[self.rho_idx]),
                               solver=res)


def build_relaxation(inst: ValidatedInstance, fixed: Mapping[int, int] | None = None,
                     traffic: TrafficSolution | None = None, *, link_capacity: bool | None = None) -> Relaxation:
    """Linearised convex relaxation of the joint placement/allocation problem.

    ``fixed`` maps VNF index to host index for already-placed VNFs; their
    placement variables become constants, which also turns the product
    variables touching them into plain copies or constants.
    """
    traffic = traffic or solve_traffic(inst)
    fixed = dict(fixed or {})
    link_capacity = inst.enforce_link_capacity if link_capacity is None else link_capacity
    n_h, n_q, n_k = inst.n_hosts, inst.n_queues, inst.n_classes
    lam = traffic.big_lambda
    v = _Vars()
    ineq = _Rows()
    eq = _Rows()

    # placement fractions
    a_expr = {}
    for q in range(n_q):
        if n_h == 1 and q not in fixed:
            fixed[q] = 0
        for h in range(n_h):
            if q in fixed:
                a_expr[h, q] = ("const", 1.0 if fixed[q] == h else 0.0)
            else:
                a_expr[h, q] = ("var", v.add(f"A[{h},{q}]", lb=0.0, x0=1.0 / n_h))
        if q not in fixed:
            eq.add({a_expr[h, q][1]: 1.0 for h in range(n_h)}, 1.0)

    # CPU-share surrogates
    psi_expr = {}
    for h in range(n_h):
        for q in range(n_q):
            kind, val = a_expr[h, q]
            if kind == "const" and val == 0.0:
                psi_expr[h, q] = ("const", 0.0)
                continue
            ub = 1.0 if kind == "const" else np.inf
            j = v.add(f"psi[{h},{q}]", lb=0.0, ub=ub, x0=0.5 / (n_q + 1) * (1.0 / n_h if kind == "var" else 1.0))
            psi_expr[h, q] = ("var", j)
            if kind == "var":
                ineq.add({j: 1.0, val: -1.0}, 0.0)
        terms = {psi_expr[h, q][1]: 1.0 for q in range(n_q) if psi_expr[h, q][0] == "var"}
        if terms:
            ineq.add(terms, 1.0)

    # products of placement fractions
    phi_expr = {}
    edges = inst.edges()
    for q, r in edges:
        for h in range(n_h):
            for l in range(n_h):
                if h == l:
                    continue
                ka, va = a_expr[h, q]
                kb, vb = a_expr[l, r]
                if (ka == "const" and va == 0.0) or (kb == "const" and vb == 0.0):
                    phi_expr[h, l, q, r] = ("const", 0.0)
                elif ka == "const" and kb == "const":
                    phi_expr[h, l, q, r] = ("const", 1.0)
                elif ka == "const":
                    phi_expr[h, l, q, r] = ("var", vb)
                elif kb == "const":
                    phi_expr[h, l, q, r] = ("var", va)
                else:
                    j = v.add(f"phi[{h},{l},{q},{r}]", lb=0.0, x0=1.0 / n_h**2)
                    phi_expr[h, l, q, r] = ("var", j)
                    ineq.add({j: 1.0, va: -1.0}, 0.0)
                    ineq.add({j: 1.0, vb: -1.0}, 0.0)
                    ineq.add({va: 1.0, vb: 1.0, j: -1.0}, 1.0)

    margin = inst.stability_margin
    mu_idx = np.array([v.add(f"mu[{q}]", lb=lam[q] + margin, x0=lam[q] + 2 * margin) for q in range(n_q)])
    rho_idx = v.add("rho")

    # service rate limited by the CPU shares it is granted
    for q in range(n_q):
        terms = {int(mu_idx[q]): 1.0}
        rhs = 0.0
        for h in range(n_h):
            kind, val = psi_expr[h, q]
            if kind == "var":
                terms[val] = terms.get(val, 0.0) - inst.kappa[h]
            else:
                rhs += inst.kappa[h] * val
        ineq.add(terms, rhs)

    # network latency of each class, as an auxiliary variable tied by an equality
    hop_rate = np.einsum("kq,kqr->kqr", traffic.gamma, inst.transfer)
    net_idx = []
    for k in range(n_k):
        j = v.add(f"net[{k}]")
        net_idx.append(j)
        terms = {j: -1.0}
        const = 0.0
        for q, r in edges:
            w = hop_rate[k, q, r]
            if w == 0.0:
                continue
            for h in range(n_h):
                for l in range(n_h):
                    if h == l or inst.delay[h, l] == 0.0:
                        continue
                    kind, val = phi_expr[h, l, q, r]
                    c = w * inst.delay[h, l]
                    if kind == "var":
                        terms[val] = terms.get(val, 0.0) + c
                    else:
                        const += c * val
        eq.add(terms, -const)

    if link_capacity:
        flow_rate = np.einsum("kq,kqr->qr", traffic.lambda_hat, inst.transfer)
        for h in range(n_h):
            for l in range(n_h):
                if h == l or not np.isfinite(inst.capacity[h, l]):
                    continue
                terms, const = {}, 0.0
                for q, r in edges:
                    w = flow_rate[q, r]
                    if w == 0.0:
                        continue
                    kind, val = phi_expr[h, l, q, r]
                    if kind == "var":
                        terms[val] = terms.get(val, 0.0) + w
                    else:
                        const += w * val
                if terms:
                    ineq.add(terms, inst.capacity[h, l] - const)
                elif const > inst.capacity[h, l]:
                    raise InfeasibleError(f"fixed VNFs overload link {inst.host_ids[h]}->{inst.host_ids[l]}")

    n = len(v)
    nonlinear = []
    for k in range(n_k):
        qs = np.flatnonzero(traffic.gamma[k] > 0)
        nonlinear.append(convex.ReciprocalAffine(
            lin_idx=np.array([net_idx[k], rho_idx]), lin_coef=np.array([1.0 / inst.qos[k], -1.0]),
            rec_idx=mu_idx[qs], rec_shift=lam[qs], rec_weight=traffic.gamma[k, qs] / inst.qos[k]))

    G, h_vec = ineq.matrix(n)
    A, b = eq.matrix(n)
    x0 = np.array(v.x0)
    prog = convex.ConvexProgram(n=n, objective=convex.ReciprocalAffine.linear([rho_idx], [1.0]),
                                lb=np.array(v.lb), ub=np.array(v.ub), G=G, h=h_vec, A=A, b=b,
                                nonlinear=nonlinear, x0=x0, names=v.names)
    return Relaxation(program=prog, a_expr=a_expr, psi_expr=psi_expr, phi_expr=phi_expr, mu_idx=mu_idx,
                      rho_idx=rho_idx, n_hosts=n_h, n_queues=n_q)


def solve_relaxation(inst: ValidatedInstance, fixed: Mapping[int, int] | None = None,
                     traffic: TrafficSolution | None = None, *, tol: float = 1e-7,
                     link_capacity: bool | None = None) -> RelaxedSolution:
    relax = build_relaxation(inst, fixed, traffic, link_capacity=link_capacity)
    try:
        res = convex.solve(relax.program, tol=tol, factor=20.0)
    except convex.Infeasible as exc:
        raise InfeasibleError(f"relaxation infeasible with {len(fixed or {})} VNFs fixed: {exc}") from exc
    except convex.IterationLimit as exc:
        # the relaxed point only steers the next placement decision, so a
        # nearly converged iterate is good enough; anything worse is an error
        res = exc.result
        if res is None or res.kkt.max() > RELAXATION_SLACK * tol:
            raise
        log.warning("relaxation stopped at KKT residual %.3g (tolerance %g); using it", res.kkt.max(), tol)
    return relax.decode(res)


def z_scores(relaxed: RelaxedSolution, inst: ValidatedInstance, fixed: Mapping[int, int] | None = None,
             traffic: TrafficSolution | None = None) -> ZScoreTable:
    traffic = traffic or solve_traffic(inst)
    threshold = traffic.big_lambda[None, :] / inst.kappa[:, None]
    z = relaxed.a_tilde + (relaxed.psi >= threshold - PSI_THRESHOLD_TOL)
    mask = np.zeros_like(z, dtype=bool)
    for q in (fixed or {}):
        mask[:, q] = True
    return ZScoreTable(z=z, mask=mask)


@dataclass
class MaxZIteration:
    relaxed: RelaxedSolution
    scores: ZScoreTable
    chosen: tuple[int, int]  # (host, vnf)


@dataclass
class MaxZResult:
    placement: Placement
    trace: list[MaxZIteration]

    @property
    def relaxation_solves(self) -> int:
        return len(self.trace)

    @property
    def first_relaxed_rho(self) -> float:
        return self.trace[0].relaxed.rho


def run_maxz(inst: ValidatedInstance, traffic: TrafficSolution | None = None, *, tol: float = 1e-7,
             link_capacity: bool | None = None) -> MaxZResult:
    """Place every VNF instance, one relaxation solve per instance."""
    if not inst.is_expanded():
        raise ValueError("instance has replicated VNFs; expand it with replicate_graph first")
    traffic = traffic or solve_traffic(inst)
    fixed: dict[int, int] = {}
    trace = []
    for _ in range(inst.n_queues):
        relaxed = solve_relaxation(inst, fixed, traffic, tol=tol, link_capacity=link_capacity)
        scores = z_scores(relaxed, inst, fixed, traffic)
        choice = None
        for h, q in scores.ranked():
            trial = dict(fixed)
            trial[q] = h
            if partial_capacity_ok(inst, trial, traffic.big_lambda):
                choice = (h, q)
                break
        if choice is None:
            raise InfeasibleError("no host can accept any remaining VNF without exceeding its capacity")
        fixed[choice[1]] = choice[0]
        trace.append(MaxZIteration(relaxed=relaxed, scores=scores, chosen=choice))
    placement = Placement(tuple(fixed[q] for q in range(inst.n_queues)))
    return MaxZResult(placement=placement, trace=trace)
