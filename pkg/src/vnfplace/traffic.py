"""Analytic queuing quantities for a fixed placement and CPU allocation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .model import CpuAllocation, Placement, UnstableQueue, ValidatedInstance


class SingularSystem(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class TrafficSolution:
    lambda_hat: np.ndarray  # [k, q] total class-k rate into q (requests/ms)
    big_lambda: np.ndarray  # [q] aggregate rate into q
    gamma: np.ndarray  # [k, q] expected visits per class-k request


@dataclass(frozen=True)
class DelayBreakdown:
    processing: np.ndarray  # [k] ms
    network: np.ndarray  # [k] ms
    total: np.ndarray  # [k] ms
    ratio: np.ndarray  # [k] total / qos
    objective: float

    @property
    def critical(self) -> int:
        return int(np.argmax(self.ratio))


def _solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        lu = scipy.linalg.lu_factor(matrix, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SingularSystem(str(exc)) from exc
    if np.any(np.abs(np.diag(lu[0])) < 1e-14):
        raise SingularSystem("routing system is singular")
    x = scipy.linalg.lu_solve(lu, rhs)
    residual = np.linalg.norm(matrix @ x - rhs)
    if residual > 1e-10 * max(np.linalg.norm(rhs), 1.0):
        # one step of iterative refinement
        x = x + scipy.linalg.lu_solve(lu, rhs - matrix @ x)
    return x


def solve_traffic(inst: ValidatedInstance) -> TrafficSolution:
    """Total arrival rates and visit counts per class.

    Rates solve ``lam_hat = lam + P^T lam_hat``. Visit counts solve the same
    system driven by entry probabilities with self-transitions removed, so a
    request looping on ``q`` counts as a single visit there.
    """
    n_k, n_q = inst.n_classes, inst.n_queues
    lam_hat = np.zeros((n_k, n_q))
    gamma = np.zeros((n_k, n_q))
    eye = np.eye(n_q)
    for k in range(n_k):
        p = inst.transfer[k]
        lam_hat[k] = _solve(eye - p.T, inst.ext_rate[k])
        p_off = p - np.diag(np.diag(p))
        gamma[k] = _solve(eye - p_off.T, inst.entry_prob[k])
    lam_hat = np.where(np.abs(lam_hat) < 1e-15, 0.0, lam_hat)
    gamma = np.where(np.abs(gamma) < 1e-15, 0.0, gamma)
    return TrafficSolution(lambda_hat=lam_hat, big_lambda=lam_hat.sum(axis=0), gamma=gamma)


def response_time(mu: float, big_lambda: float) -> float:
    """Mean M/M/1 FCFS sojourn time, 1 / (mu - Lambda)."""
    if not mu > big_lambda:
        raise UnstableQueue(f"service rate {mu} does not exceed arrival rate {big_lambda}")
    return 1.0 / (mu - big_lambda)


def hop_delay_matrix(inst: ValidatedInstance, placement: Placement) -> np.ndarray:
    """delta(host(q), host(r)) for every queue pair."""
    hosts = np.asarray(placement.host_of)
    return inst.delay[np.ix_(hosts, hosts)]


def network_latency(inst: ValidatedInstance, traffic: TrafficSolution, placement: Placement) -> np.ndarray:
    """Expected per-class network latency summed over all queue pairs (q = r included)."""
    hop = hop_delay_matrix(inst, placement)
    return np.einsum("kq,kqr,qr->k", traffic.gamma, inst.transfer, hop)


def _network_term_distinct(inst: ValidatedInstance, traffic: TrafficSolution, placement: Placement) -> np.ndarray:
    hop = hop_delay_matrix(inst, placement).copy()
    np.fill_diagonal(hop, 0.0)
    return np.einsum("kq,kqr,qr->k", traffic.gamma, inst.transfer, hop)


def class_delays(inst: ValidatedInstance, traffic: TrafficSolution, placement: Placement,
                 alloc: CpuAllocation) -> DelayBreakdown:
    mu = np.asarray(alloc.mu, dtype=float)
    gap = mu - traffic.big_lambda
    if np.any(gap <= 0):
        q = int(np.argmin(gap))
        raise UnstableQueue(f"queue {inst.queue_ids[q]}: mu={mu[q]} <= Lambda={traffic.big_lambda[q]}")
    processing = traffic.gamma @ (1.0 / gap)
    network = _network_term_distinct(inst, traffic, placement)
    total = processing + network
    ratio = total / inst.qos
    return DelayBreakdown(processing=processing, network=network, total=total, ratio=ratio,
                          objective=float(ratio.max()))


@dataclass(frozen=True)
class LinkFlows:
    flow: np.ndarray  # [h, l] requests/ms
    violations: tuple[tuple[int, int, float, float], ...]  # (h, l, flow, capacity)

    @property
    def ok(self) -> bool:
        return not self.violations


def link_flows(inst: ValidatedInstance, traffic: TrafficSolution, placement: Placement) -> LinkFlows:
    # hop rate between queue pairs, then aggregate by host pair
    rate = np.einsum("kq,kqr->qr", traffic.lambda_hat, inst.transfer)
    a = placement.matrix(inst.n_hosts)
    flow = a @ rate @ a.T
    np.fill_diagonal(flow, 0.0)
    viol = []
    for h, l in zip(*np.nonzero(flow > inst.capacity * (1 + 1e-12))):
        if h != l:
            viol.append((int(h), int(l), float(flow[h, l]), float(inst.capacity[h, l])))
    return LinkFlows(flow=flow, violations=tuple(viol))
