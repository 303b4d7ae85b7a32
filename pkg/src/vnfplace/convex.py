"""Log-barrier interior-point solver for reciprocal-gap convex programs.

Programs have the shape

    minimize    f0(x)
    subject to  f_j(x) <= 0           (nonlinear, j = 1..J)
                G x <= h
                A x  = b
                lb <= x <= ub

where every ``f`` is affine plus a sum of terms ``w / (x_i - a)`` with
``w >= 0``; the bound ``lb_i > a`` keeps each term on its convex branch.
Min-max objectives are expressed through an epigraph variable.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DENSE_LIMIT = 400
SCHUR_LIMIT = 2500
CENTERED_DECREMENT = 1e-6
GAP_SAFETY = 1.0


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ITERATION_LIMIT = "IterationLimit"


class SolverError(RuntimeError):
    def __init__(self, status: Status, message: str, result: "SolverResult | None" = None):
        super().__init__(message)
        self.status = status
        self.result = result


class Infeasible(SolverError):
    def __init__(self, message: str, result=None):
        super().__init__(Status.INFEASIBLE, message, result)


class IterationLimit(SolverError):
    def __init__(self, message: str, result=None):
        super().__init__(Status.ITERATION_LIMIT, message, result)


@dataclass
class ReciprocalAffine:
    """``c . x + const + sum_t w_t / (x[idx_t] - shift_t)``."""

    lin_idx: np.ndarray
    lin_coef: np.ndarray
    const: float = 0.0
    rec_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    rec_shift: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rec_weight: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.lin_idx = np.asarray(self.lin_idx, dtype=int)
        self.lin_coef = np.asarray(self.lin_coef, dtype=float)
        self.rec_idx = np.asarray(self.rec_idx, dtype=int)
        self.rec_shift = np.asarray(self.rec_shift, dtype=float)
        self.rec_weight = np.asarray(self.rec_weight, dtype=float)
        self.support = np.unique(np.concatenate([self.lin_idx, self.rec_idx]))

    @classmethod
    def linear(cls, idx, coef, const=0.0) -> "ReciprocalAffine":
        return cls(np.asarray(idx, dtype=int), np.asarray(coef, dtype=float), const)

    def value(self, x: np.ndarray) -> float:
        v = self.const + float(self.lin_coef @ x[self.lin_idx])
        if self.rec_idx.size:
            v += float(np.sum(self.rec_weight / (x[self.rec_idx] - self.rec_shift)))
        return v

    def gradient(self, x: np.ndarray) -> np.ndarray:
        g = np.zeros(x.size)
        np.add.at(g, self.lin_idx, self.lin_coef)
        if self.rec_idx.size:
            gap = x[self.rec_idx] - self.rec_shift
            np.add.at(g, self.rec_idx, -self.rec_weight / gap**2)
        return g

    def hessian_diag(self, x: np.ndarray) -> np.ndarray:
        d = np.zeros(x.size)
        if self.rec_idx.size:
            gap = x[self.rec_idx] - self.rec_shift
            np.add.at(d, self.rec_idx, 2.0 * self.rec_weight / gap**3)
        return d

    def with_extra_linear(self, idx: int, coef: float) -> "ReciprocalAffine":
        return ReciprocalAffine(np.append(self.lin_idx, idx), np.append(self.lin_coef, coef), self.const,
                                self.rec_idx, self.rec_shift, self.rec_weight)

    def in_domain(self, x: np.ndarray) -> bool:
        return bool(np.all(x[self.rec_idx] > self.rec_shift))


@dataclass
class ConvexProgram:
    n: int
    objective: ReciprocalAffine
    lb: np.ndarray
    ub: np.ndarray
    G: sp.csr_matrix | None = None
    h: np.ndarray | None = None
    A: sp.csr_matrix | None = None
    b: np.ndarray | None = None
    nonlinear: Sequence[ReciprocalAffine] = ()
    x0: np.ndarray | None = None
    names: Sequence[str] | None = None

    def __post_init__(self):
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        if self.G is None:
            self.G, self.h = sp.csr_matrix((0, self.n)), np.zeros(0)
        if self.A is None:
            self.A, self.b = sp.csr_matrix((0, self.n)), np.zeros(0)
        self.G = sp.csr_matrix(self.G)
        self.A = sp.csr_matrix(self.A)
        self.h = np.asarray(self.h, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.nonlinear = list(self.nonlinear)
        self._check()

    def _check(self):
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise ValueError("bounds must have one entry per variable")
        if self.G.shape[1] != self.n or self.A.shape[1] != self.n:
            raise ValueError("constraint matrices have the wrong width")
        if self.G.shape[0] != self.h.size or self.A.shape[0] != self.b.size:
            raise ValueError("constraint right-hand sides have the wrong length")
        for f in [self.objective, *self.nonlinear]:
            if np.any(f.rec_weight < 0):
                raise ValueError("reciprocal-gap weights must be nonnegative for convexity")
            if f.rec_idx.size and np.any(self.lb[f.rec_idx] <= f.rec_shift):
                raise ValueError("every reciprocal term needs a lower bound strictly above its pole")

    @property
    def n_inequalities(self) -> int:
        return (int(np.isfinite(self.lb).sum()) + int(np.isfinite(self.ub).sum())
                + self.G.shape[0] + len(self.nonlinear))


@dataclass
class Duals:
    lower: np.ndarray
    upper: np.ndarray
    linear: np.ndarray
    nonlinear: np.ndarray
    equality: np.ndarray


@dataclass
class KktResiduals:
    stationarity: float
    primal: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity)


@dataclass
class SolverResult:
    x: np.ndarray
    objective: float
    duals: Duals
    status: Status
    iterations: int  # barrier (outer) updates
    newton_steps: int
    kkt: KktResiduals
    gap: float


def _constraint_slacks(prog, x, Gd):
    lo = np.isfinite(prog.lb)
    up = np.isfinite(prog.ub)
    s_lo = x[lo] - prog.lb[lo]
    s_up = prog.ub[up] - x[up]
    s_lin = prog.h - (Gd @ x)
    s_nl = np.array([-f.value(x) for f in prog.nonlinear])
    return lo, up, s_lo, s_up, s_lin, s_nl


def _lagrangian_gradient(prog: ConvexProgram, x, duals: Duals, with_equality: bool = True) -> np.ndarray:
    lo = np.isfinite(prog.lb)
    up = np.isfinite(prog.ub)
    grad = prog.objective.gradient(x)
    grad[lo] -= duals.lower[lo]
    grad[up] += duals.upper[up]
    grad += prog.G.T @ duals.linear
    for lam, f in zip(duals.nonlinear, prog.nonlinear):
        grad += lam * f.gradient(x)
    if with_equality:
        grad += prog.A.T @ duals.equality
    return grad


def check_kkt(prog: ConvexProgram, x: np.ndarray, duals: Duals) -> KktResiduals:
    """Stationarity norm, worst primal violation and worst |multiplier * slack|."""
    x = np.asarray(x, dtype=float)
    lo, up, s_lo, s_up, s_lin, s_nl = _constraint_slacks(prog, x, prog.G)
    grad = _lagrangian_gradient(prog, x, duals)
    violations = [0.0]
    for s in (s_lo, s_up, s_lin, s_nl):
        if s.size:
            violations.append(float(np.max(-s)))
    if prog.A.shape[0]:
        # measured relative to each row's largest coefficient
        row_scale = np.maximum(1.0, abs(prog.A).max(axis=1).toarray().ravel())
        violations.append(float(np.max(np.abs(prog.A @ x - prog.b) / row_scale)))
    comp = [0.0]
    for lam, s in ((duals.lower[lo], s_lo), (duals.upper[up], s_up), (duals.linear, s_lin), (duals.nonlinear, s_nl)):
        if s.size:
            comp.append(float(np.max(np.abs(lam * s))))
    neg = [0.0]
    for lam in (duals.lower, duals.upper, duals.linear, duals.nonlinear):
        if lam.size:
            neg.append(float(np.max(-lam)))
    return KktResiduals(stationarity=float(np.linalg.norm(grad)),
                        primal=max(0.0, *violations, *neg),
                        complementarity=max(comp))


class _Barrier:
    """Newton machinery for ``t f0 + phi`` on one program.

    The nonlinear constraints are stacked: a linear part ``L x + c`` plus
    reciprocal terms scattered into their owning rows.
    """

    def __init__(self, prog: ConvexProgram):
        self.prog = prog
        self.dense = prog.n + prog.A.shape[0] <= DENSE_LIMIT
        self.G = prog.G.toarray() if self.dense else prog.G
        self.GT = self.G.T if self.dense else prog.G.T.tocsr()
        self.A = prog.A.toarray() if self.dense else prog.A
        self.lo_idx = np.flatnonzero(np.isfinite(prog.lb))
        self.up_idx = np.flatnonzero(np.isfinite(prog.ub))
        self.lb = prog.lb[self.lo_idx]
        self.ub = prog.ub[self.up_idx]
        fs = prog.nonlinear
        self.n_nl = len(fs)
        rows = np.concatenate([np.full(f.lin_idx.size, j) for j, f in enumerate(fs)]) if fs else np.zeros(0, int)
        cols = np.concatenate([f.lin_idx for f in fs]) if fs else np.zeros(0, int)
        vals = np.concatenate([f.lin_coef for f in fs]) if fs else np.zeros(0)
        L = sp.csr_matrix((vals, (rows, cols)), shape=(self.n_nl, prog.n))
        self.L = L.toarray() if self.dense else L
        self.nl_const = np.array([f.const for f in fs])
        self.owner = np.concatenate([np.full(f.rec_idx.size, j) for j, f in enumerate(fs)]).astype(int) \
            if fs else np.zeros(0, int)
        self.r_idx = np.concatenate([f.rec_idx for f in fs]).astype(int) if fs else np.zeros(0, int)
        self.r_shift = np.concatenate([f.rec_shift for f in fs]) if fs else np.zeros(0)
        self.r_w = np.concatenate([f.rec_weight for f in fs]) if fs else np.zeros(0)
        obj = prog.objective
        self.obj_has_rec = obj.rec_idx.size > 0
        self.elim = None if self.dense else _diagonal_block(prog, L, self.owner, self.r_idx)

    def _nl(self, x):
        d = x[self.r_idx] - self.r_shift
        vals = self.L @ x + self.nl_const
        if d.size:
            vals = vals + np.bincount(self.owner, self.r_w / d, minlength=self.n_nl)
        return vals, d

    def slacks(self, x):
        s_lo = x[self.lo_idx] - self.lb
        s_up = self.ub - x[self.up_idx]
        s_lin = self.prog.h - self.G @ x
        s_nl = -self._nl(x)[0] if self.n_nl else np.zeros(0)
        return s_lo, s_up, s_lin, s_nl

    def feasible(self, x) -> bool:
        return math.isfinite(self.merit(x, 0.0))

    def merit(self, x, t) -> float:
        """Barrier merit ``t f0 - sum log(slack)``; +inf outside the strict interior."""
        p = self.prog
        total = 0.0
        if self.n_nl:
            vals, d = self._nl(x)
            if d.size and d.min() <= 0:
                return math.inf
            if vals.max() >= 0:
                return math.inf
            total -= float(np.log(-vals).sum())
        for s in (x[self.lo_idx] - self.lb, self.ub - x[self.up_idx], p.h - self.G @ x):
            if s.size:
                if s.min() <= 0:
                    return math.inf
                total -= float(np.log(s).sum())
        if self.obj_has_rec and np.any(x[p.objective.rec_idx] <= p.objective.rec_shift):
            return math.inf
        if t:
            total += t * p.objective.value(x)
        return total

    def newton_system(self, x, t):
        p = self.prog
        n = p.n
        s_lo = x[self.lo_idx] - self.lb
        s_up = self.ub - x[self.up_idx]
        s_lin = p.h - self.G @ x
        grad = t * p.objective.gradient(x)
        diag = t * p.objective.hessian_diag(x)
        grad[self.lo_idx] -= 1.0 / s_lo
        diag[self.lo_idx] += 1.0 / s_lo**2
        grad[self.up_idx] += 1.0 / s_up
        diag[self.up_idx] += 1.0 / s_up**2
        grad += self.GT @ (1.0 / s_lin)
        w_lin = 1.0 / s_lin**2
        if self.n_nl:
            vals, d = self._nl(x)
            inv_s = -1.0 / vals
            # Jacobian rows of the nonlinear constraints
            jr = -self.r_w / d**2
            if self.dense:
                J = self.L.copy()
                np.add.at(J, (self.owner, self.r_idx), jr)
            else:
                J = (self.L + sp.csr_matrix((jr, (self.owner, self.r_idx)), shape=(self.n_nl, n))).tocsr()
            grad += J.T @ inv_s
            diag += np.bincount(self.r_idx, 2.0 * self.r_w / d**3 * inv_s[self.owner], minlength=n)
        if self.dense:
            H = (self.G.T * w_lin) @ self.G
            if self.n_nl:
                Js = J * inv_s[:, None]
                H += Js.T @ Js
            H[np.diag_indices(n)] += diag
        else:
            H = self.GT @ sp.diags(w_lin) @ self.G + sp.diags(diag)
            if self.n_nl:
                Js = sp.diags(inv_s) @ J
                H = H + Js.T @ Js
            H = H.tocsc()
        return grad, H

    def solve_kkt(self, H, grad, resid_eq):
        """Newton direction and equality multipliers.

        The system is equilibrated first: barrier Hessian entries span many
        orders of magnitude near the boundary, which wrecks an unscaled LU.
        """
        p = self.prog
        n, m_eq = p.n, p.A.shape[0]
        hd = H.diagonal() if not self.dense else np.diag(H).copy()
        d = 1.0 / np.sqrt(np.where(hd > 0, hd, 1.0))
        if self.dense:
            Hs = H * d[:, None] * d[None, :]
            if m_eq:
                AD = self.A * d[None, :]
                r = 1.0 / np.maximum(np.abs(AD).max(axis=1), 1e-300)
                AD *= r[:, None]
                K = np.zeros((n + m_eq, n + m_eq))
                K[:n, :n] = Hs
                K[:n, n:] = AD.T
                K[n:, :n] = AD
            else:
                r = np.zeros(0)
                K = Hs
            rhs = np.concatenate([-grad * d, resid_eq * r])
            try:
                lu = scipy.linalg.lu_factor(K, check_finite=False)
                sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
                # one refinement step recovers digits lost to conditioning
                sol += scipy.linalg.lu_solve(lu, rhs - K @ sol, check_finite=False)
            except (np.linalg.LinAlgError, ValueError):
                sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            if not np.all(np.isfinite(sol)):
                sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        else:
            D = sp.diags(d)
            Hs = D @ H @ D
            if m_eq:
                AD = self.A @ D
                r = 1.0 / np.maximum(abs(AD).max(axis=1).toarray().ravel(), 1e-300)
                AD = sp.diags(r) @ AD
                K = sp.bmat([[Hs, AD.T], [AD, None]], format="csc")
            else:
                r = np.zeros(0)
                K = Hs.tocsc()
            rhs = np.concatenate([-grad * d, resid_eq * r])
            sol = None
            if self.elim is not None:
                mask = np.concatenate([self.elim, np.zeros(m_eq, bool)])
                try:
                    solve = _schur_factor(K, mask)
                    sol = solve(rhs)
                    sol += solve(rhs - K @ sol)
                except (np.linalg.LinAlgError, ValueError):
                    sol = None
            if sol is not None and np.all(np.isfinite(sol)):
                return sol[:n] * d, sol[n:] * r
            sol = spla.spsolve(K, rhs)
            if not np.all(np.isfinite(sol)):
                sol = spla.lsqr(K, rhs, atol=1e-14, btol=1e-14)[0]
            else:
                sol += spla.spsolve(K, rhs - K @ sol)
        return sol[:n] * d, sol[n:] * r


def _diagonal_block(prog: ConvexProgram, L, owner, r_idx) -> np.ndarray | None:
    """Variables whose Hessian block is structurally diagonal (greedy independent set).

    Eliminating them first leaves a small dense Schur complement; without
    this, sparse LU on McCormick-style programs fills in catastrophically.
    """
    n = prog.n
    G = abs(prog.G).tocsr()
    G.data[:] = 1.0
    J = (abs(L) + sp.csr_matrix((np.ones(r_idx.size), (owner, r_idx)), shape=L.shape)).tocsr()
    J.data[:] = 1.0
    P = (G.T @ G + J.T @ J).tocsr()
    P.setdiag(0)
    P.eliminate_zeros()
    deg = np.diff(P.indptr)
    chosen = np.zeros(n, dtype=bool)
    blocked = np.zeros(n, dtype=bool)
    for v in np.argsort(deg, kind="stable"):
        if not blocked[v]:
            chosen[v] = True
            blocked[P.indices[P.indptr[v]:P.indptr[v + 1]]] = True
    kept = n - int(chosen.sum()) + prog.A.shape[0]
    return chosen if kept <= SCHUR_LIMIT and chosen.sum() > n // 2 else None


def _schur_factor(K, mask):
    # K = [[diag(hD), B^T], [B, C]] after permutation; dense LU on the complement
    D, R = np.flatnonzero(mask), np.flatnonzero(~mask)
    K = K.tocsr()
    hD = K[D][:, D].diagonal()
    if np.any(hD <= 0):
        raise ValueError("eliminated block is not positive diagonal")
    B = K[R][:, D].tocsr()
    S = K[R][:, R].toarray() - (B @ sp.diags(1.0 / hD) @ B.T).toarray()
    lu = scipy.linalg.lu_factor(S, check_finite=True)

    def solve(f):
        fD = f[D]
        y = scipy.linalg.lu_solve(lu, f[R] - B @ (fD / hD))
        z = np.empty_like(f)
        z[R] = y
        z[D] = (fD - B.T @ y) / hD
        return z
    return solve


@dataclass
class _Centered:
    x: np.ndarray
    t: float
    nu: np.ndarray
    newton_steps: int
    stopped: bool = False
    converged: bool = True


def _center(bar: _Barrier, x, t, *, max_newton, eps, stop: Callable | None = None) -> _Centered:
    p = bar.prog
    steps = 0
    nu = np.zeros(p.A.shape[0])
    decrement = math.inf
    for _ in range(max_newton):
        grad, H = bar.newton_system(x, t)
        resid_eq = p.b - (bar.A @ x) if p.A.shape[0] else np.zeros(0)
        dx, w = bar.solve_kkt(H, grad, resid_eq)
        nu = w / t
        # dx'H dx rather than -grad'dx: the latter goes negative when the
        # equality residual is at round-off level and would end centring early
        decrement = float(dx @ (H @ dx))
        steps += 1
        if decrement / 2.0 <= eps and np.linalg.norm(resid_eq) <= 1e-12:
            break
        step = 1.0
        f0 = bar.merit(x, t)
        slope = float(grad @ dx)
        while step > 1e-16:
            cand = x + step * dx
            if bar.merit(cand, t) <= f0 + 0.01 * step * min(slope, 0.0):
                break
            step *= 0.5
        else:
            # at large t the decrease can sit below the merit's round-off; then
            # judge the full step by whether it shrinks the Newton decrement
            cand = x + dx
            if not (bar.feasible(cand) and abs(bar.merit(cand, t) - f0) <= 1e-12 * (1.0 + abs(f0))):
                break
            g2, H2 = bar.newton_system(cand, t)
            r2 = p.b - (bar.A @ cand) if p.A.shape[0] else np.zeros(0)
            dx2, _ = bar.solve_kkt(H2, g2, r2)
            if not float(dx2 @ (H2 @ dx2)) < decrement:
                break
        x = cand
        if stop is not None and stop(x):
            return _Centered(x, t, nu, steps, stopped=True)
        if step * np.max(np.abs(dx)) <= 1e-15 * (1 + np.max(np.abs(x))):
            break
    # a centre is usable when the Newton decrement is small, even if round-off
    # kept it above eps
    return _Centered(x, t, nu, steps, converged=decrement / 2.0 <= CENTERED_DECREMENT)


def _duals_at(bar: _Barrier, x, t, nu, tol: float | None = None) -> Duals:
    p = bar.prog
    s_lo, s_up, s_lin, s_nl = bar.slacks(x)
    lower = np.zeros(p.n)
    upper = np.zeros(p.n)
    lower[bar.lo_idx] = 1.0 / (t * s_lo)
    upper[bar.up_idx] = 1.0 / (t * s_up)
    duals = Duals(lower=lower, upper=upper, linear=1.0 / (t * s_lin), nonlinear=1.0 / (t * s_nl), equality=nu)
    if p.A.shape[0]:
        # equality multipliers: best fit of stationarity given the others, which
        # is steadier than the Newton system's estimate near the boundary
        r = _lagrangian_gradient(p, x, duals, with_equality=False)
        AT = p.A.T.toarray()
        fit = np.linalg.lstsq(AT, -r, rcond=None)[0]
        if np.linalg.norm(r + AT @ fit) <= np.linalg.norm(r + AT @ nu):
            duals.equality = fit
    if tol is not None and bar.dense:
        polished = _polish_duals(bar, x, duals, (s_lo, s_up, s_lin, s_nl), tol)
        if polished is not None:
            duals = polished
    return duals


def _polish_duals(bar: _Barrier, x, duals: Duals, slacks, tol) -> Duals | None:
    """Refit multipliers of near-active constraints by nonnegative least squares.

    Near the end of the path the slacks of active constraints are ~1/t and
    come out of a cancellation, so 1/(t s) is only accurate to a few digits.
    Stationarity pins the multipliers down far better.
    """
    p = bar.prog
    s_lo, s_up, s_lin, s_nl = slacks
    nl_grads = np.array([f.gradient(x) for f in p.nonlinear]).reshape(-1, p.n)
    # (constraint gradient, slack, current multiplier, setter)
    cols, keys = [], []
    for j, i in enumerate(bar.lo_idx):
        if s_lo[j] <= tol:
            e = np.zeros(p.n)
            e[i] = -1.0
            cols.append(e)
            keys.append(("lower", i, s_lo[j]))
    for j, i in enumerate(bar.up_idx):
        if s_up[j] <= tol:
            e = np.zeros(p.n)
            e[i] = 1.0
            cols.append(e)
            keys.append(("upper", i, s_up[j]))
    for i in np.flatnonzero(s_lin <= tol):
        cols.append(bar.G[i])
        keys.append(("linear", i, s_lin[i]))
    for i in np.flatnonzero(s_nl <= tol):
        cols.append(nl_grads[i])
        keys.append(("nonlinear", i, s_nl[i]))
    if not cols:
        return None
    trial = Duals(lower=duals.lower.copy(), upper=duals.upper.copy(), linear=duals.linear.copy(),
                  nonlinear=duals.nonlinear.copy(), equality=np.zeros_like(duals.equality))
    for kind, i, _ in keys:
        getattr(trial, kind)[i] = 0.0
    base = _lagrangian_gradient(p, x, trial, with_equality=False)
    AT = bar.A.T if p.A.shape[0] else np.zeros((p.n, 0))
    M = np.column_stack(cols + [AT, -AT])
    coef, _ = scipy.optimize.nnls(M, -base, maxiter=50 * M.shape[1])
    for (kind, i, _), c in zip(keys, coef):
        getattr(trial, kind)[i] = c
    k = len(keys)
    m_eq = AT.shape[1]
    trial.equality = coef[k:k + m_eq] - coef[k + m_eq:]
    before = check_kkt(p, x, duals)
    after = check_kkt(p, x, trial)
    if after.stationarity < before.stationarity and after.complementarity <= max(tol, before.complementarity):
        return trial
    return None


def _barrier_loop(prog: ConvexProgram, x, *, tol, max_outer, t0=1.0, factor=50.0, max_newton=100,
                  stop: Callable | None = None):
    """Follow the central path; a centring that fails to converge is retried
    from the previous centre with a smaller increase of t."""
    bar = _Barrier(prog)
    m = prog.n_inequalities
    t = t0
    total_newton = 0
    outer = 0
    nu = np.zeros(prog.A.shape[0])
    mult = factor
    prev = None
    # aim below tol so the recovered multipliers meet it with room to spare
    gap_target = GAP_SAFETY * tol
    while True:
        c = _center(bar, x, t, max_newton=max_newton, eps=1e-12, stop=stop)
        total_newton += c.newton_steps
        outer += 1
        if c.stopped:
            return bar, c.x, t, c.nu, outer, total_newton, True
        if not c.converged and prev is not None:
            mult = math.sqrt(mult)
            if mult < 1.05:
                raise IterationLimit("centring failed even for tiny barrier updates")
            x, t = prev
            t = min(t * mult, m / gap_target)
            continue
        x, nu = c.x, c.nu
        if m / t <= gap_target * (1 + 1e-12) or m == 0:
            return bar, x, t, nu, outer, total_newton, False
        if outer >= max_outer:
            raise IterationLimit(f"barrier method exceeded {max_outer} updates")
        prev = (x, t)
        t = min(t * mult, m / gap_target)


def _project_equalities(prog: ConvexProgram, x):
    if prog.A.shape[0] == 0:
        return x
    A = prog.A.toarray() if prog.n <= 4 * DENSE_LIMIT else prog.A
    r = prog.b - prog.A @ x
    if sp.issparse(A):
        dx = spla.lsqr(A, r, atol=1e-15, btol=1e-15)[0]
    else:
        dx = np.linalg.lstsq(A, r, rcond=None)[0]
    return x + dx


def _phase_one_radius(prog: ConvexProgram, x0) -> float:
    pieces = [np.abs(x0), np.abs(prog.lb[np.isfinite(prog.lb)]), np.abs(prog.ub[np.isfinite(prog.ub)]),
              np.abs(prog.h), np.abs(prog.b)]
    scale = max((float(p.max()) for p in pieces if p.size), default=1.0)
    return 100.0 * (1.0 + scale)


def _phase_one_linear(prog: ConvexProgram, x0, tol):
    """Find x strictly inside the bounds and linear inequalities (equalities held)."""
    n = prog.n
    lo, up = np.isfinite(prog.lb), np.isfinite(prog.ub)
    rows = []
    rhs = []
    lo_idx, up_idx = np.flatnonzero(lo), np.flatnonzero(up)
    if lo_idx.size:
        rows.append(sp.csr_matrix((-np.ones(lo_idx.size), (np.arange(lo_idx.size), lo_idx)), shape=(lo_idx.size, n)))
        rhs.append(-prog.lb[lo_idx])
    if up_idx.size:
        rows.append(sp.csr_matrix((np.ones(up_idx.size), (np.arange(up_idx.size), up_idx)), shape=(up_idx.size, n)))
        rhs.append(prog.ub[up_idx])
    if prog.G.shape[0]:
        rows.append(prog.G)
        rhs.append(prog.h)
    if not rows:
        return x0
    G = sp.vstack(rows).tocsr()
    h = np.concatenate(rhs)
    viol = float(np.max(G @ x0 - h))
    margin = 1e-3 if np.isfinite(viol) else 1.0
    if viol < -margin:
        return x0
    Gs = sp.hstack([G, -np.ones((G.shape[0], 1))]).tocsr()
    As = sp.hstack([prog.A, sp.csr_matrix((prog.A.shape[0], 1))]).tocsr()
    # box around the start keeps the auxiliary barrier bounded below
    radius = _phase_one_radius(prog, x0)
    aux = ConvexProgram(
        n=n + 1, objective=ReciprocalAffine.linear([n], [1.0]),
        lb=np.append(x0 - radius, -1.0), ub=np.append(x0 + radius, np.inf),
        G=Gs, h=h, A=As, b=prog.b,
    )
    xs = np.append(x0, viol + 1.0)
    bar, xs, t, _, _, _, stopped = _barrier_loop(aux, xs, tol=min(tol, 1e-9), max_outer=200,
                                                 stop=lambda z: z[-1] < -margin)
    if xs[-1] >= -1e-13:
        raise Infeasible(f"no strictly feasible point (phase-1 optimum {xs[-1]:.3g})")
    return xs[:n]


def _phase_one_nonlinear(prog: ConvexProgram, x, tol):
    if not prog.nonlinear:
        return x
    values = np.array([f.value(x) for f in prog.nonlinear])
    if np.all(values < 0):
        return x
    n = prog.n
    radius = _phase_one_radius(prog, x)
    aux = ConvexProgram(
        n=n + 1, objective=ReciprocalAffine.linear([n], [1.0]),
        lb=np.append(np.maximum(prog.lb, x - radius), -1.0), ub=np.append(np.minimum(prog.ub, x + radius), np.inf),
        G=sp.hstack([prog.G, sp.csr_matrix((prog.G.shape[0], 1))]).tocsr(), h=prog.h,
        A=sp.hstack([prog.A, sp.csr_matrix((prog.A.shape[0], 1))]).tocsr(), b=prog.b,
        nonlinear=[f.with_extra_linear(n, -1.0) for f in prog.nonlinear],
    )
    xs = np.append(x, values.max() + 1.0)
    _, xs, *_ = _barrier_loop(aux, xs, tol=min(tol, 1e-9), max_outer=200, stop=lambda z: z[-1] < -1e-6)
    if xs[-1] >= 0:
        raise Infeasible(f"nonlinear constraints cannot be strictly satisfied (phase-1 optimum {xs[-1]:.3g})")
    return xs[:n]


def solve(prog: ConvexProgram, tol: float = 1e-6, *, max_outer: int = 200, t0: float = 1.0,
          factor: float = 50.0) -> SolverResult:
    """Barrier interior-point method with Newton centering.

    Returns an ``Optimal`` result when the duality-gap bound m/t is at most
    ``tol`` and the KKT residuals of the recovered multipliers are within
    ``tol``. Raises :class:`Infeasible` or :class:`IterationLimit` otherwise.
    """
    x = np.zeros(prog.n) if prog.x0 is None else np.array(prog.x0, dtype=float)
    bar0 = _Barrier(prog)
    if not (bar0.feasible(x) and (prog.A.shape[0] == 0 or np.max(np.abs(prog.A @ x - prog.b)) <= 1e-10)):
        x = _project_equalities(prog, x)
        x = _phase_one_linear(prog, x, tol)
        x = _phase_one_nonlinear(prog, x, tol)
    bar, x, t, nu, outer, newton, _ = _barrier_loop(prog, x, tol=tol, max_outer=max_outer, t0=t0, factor=factor)
    duals = _duals_at(bar, x, t, nu, tol)
    kkt = check_kkt(prog, x, duals)
    gap = prog.n_inequalities / t
    result = SolverResult(x=x, objective=prog.objective.value(x), duals=duals, status=Status.OPTIMAL,
                          iterations=outer, newton_steps=newton, kkt=kkt, gap=gap)
    if kkt.primal > 1e-8:
        raise Infeasible(f"final iterate violates constraints by {kkt.primal:.3g}", result)
    scale = max(1.0, float(np.linalg.norm(prog.objective.gradient(x))))

    def accurate(k):
        return k.stationarity <= tol * scale and k.complementarity <= tol and k.primal <= 1e-8

    # re-centre more carefully, then at slightly larger t, before giving up
    for mult in (1.0, 2.0, 4.0):
        if accurate(result.kkt):
            return result
        c = _center(bar, result.x, t * mult, max_newton=200, eps=1e-15)
        duals = _duals_at(bar, c.x, c.t, c.nu, tol)
        kkt2 = check_kkt(prog, c.x, duals)
        outer += 1
        newton += c.newton_steps
        if kkt2.max() < result.kkt.max():
            result = SolverResult(x=c.x, objective=prog.objective.value(c.x), duals=duals, status=Status.OPTIMAL,
                                  iterations=outer, newton_steps=newton, kkt=kkt2, gap=prog.n_inequalities / c.t)
    if accurate(result.kkt):
        return result
    result.status = Status.ITERATION_LIMIT
    raise IterationLimit(f"KKT residuals stalled at {result.kkt.max():.3g} (tolerance {tol:g})", result)
