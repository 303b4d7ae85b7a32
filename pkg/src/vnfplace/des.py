"""Event-driven simulation of the placed queueing network.

Each VNF instance is a FCFS single server with exponential service; classes
arrive as Poisson streams, route probabilistically and pay a fixed link delay
whenever a hop crosses hosts. Nothing here uses the analytic delay formulas,
so the simulator can act as an independent check on them.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .model import CpuAllocation, Placement, UnstableQueue, ValidatedInstance
from .traffic import DelayBreakdown, solve_traffic

RNG_ALGORITHM = "numpy.random.PCG64"

_ARRIVAL, _DEPARTURE, _HOP = 0, 1, 2


class Unstable(RuntimeError):
    """A queue's backlog exceeded the configured bound during the run."""


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    warmup_requests: int = 10_000
    measured_requests: int = 100_000
    batch_count: int = 20
    backlog_bound: int = 100_000
    confidence: float = 0.95

    def __post_init__(self):
        if self.batch_count < 10:
            raise ValueError(f"batch_count must be >= 10, got {self.batch_count}")
        if self.measured_requests < 10 * self.batch_count:
            raise ValueError("measured_requests must be at least 10 * batch_count")
        if self.warmup_requests < 0:
            raise ValueError("warmup_requests must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class SimReport:
    class_ids: tuple[str, ...]
    mean_delay: np.ndarray  # [k] ms
    half_width: np.ndarray  # [k] ms, CI half-width
    samples: np.ndarray  # [k] measured requests per class
    link_flow: np.ndarray  # [h, l] requests/ms
    link_flow_se: np.ndarray  # [h, l] standard error from batch rates
    utilization: np.ndarray  # [q] busy-time fraction
    utilization_expected: np.ndarray  # [q] Lambda / mu
    queue_rate: np.ndarray  # [q] observed visit rate
    queue_sojourn: np.ndarray  # [q] mean time per visit
    queue_population: np.ndarray  # [q] time-average number in system
    duration: float
    seed: int
    rng: str = RNG_ALGORITHM
    config: SimConfig = field(default_factory=SimConfig)

    def interval(self, k: int) -> tuple[float, float]:
        return float(self.mean_delay[k] - self.half_width[k]), float(self.mean_delay[k] + self.half_width[k])


class _Draws:
    """Buffered variates; refills in blocks to keep per-event overhead low."""

    def __init__(self, gen: np.random.Generator, block: int = 65536):
        self.gen = gen
        self.block = block
        self._exp = gen.standard_exponential(block)
        self._uni = gen.random(block)
        self._i = self._j = 0

    def exp(self) -> float:
        if self._i == self.block:
            self._exp = self.gen.standard_exponential(self.block)
            self._i = 0
        v = self._exp[self._i]
        self._i += 1
        return float(v)

    def uniform(self) -> float:
        if self._j == self.block:
            self._uni = self.gen.random(self.block)
            self._j = 0
        v = self._uni[self._j]
        self._j += 1
        return float(v)


def _pick(cum: list[float], u: float) -> int:
    # index of first cumulative probability above u; len(cum) means "leave"
    for i, c in enumerate(cum):
        if u < c:
            return i
    return len(cum)


def simulate(inst: ValidatedInstance, placement: Placement, alloc: CpuAllocation,
             cfg: SimConfig | None = None) -> SimReport:
    cfg = cfg or SimConfig()
    traffic = solve_traffic(inst)
    mu = np.asarray(alloc.mu, dtype=float)
    if np.any(mu <= traffic.big_lambda):
        q = int(np.argmax(traffic.big_lambda - mu))
        raise UnstableQueue(f"queue {inst.queue_ids[q]}: mu={mu[q]} <= Lambda={traffic.big_lambda[q]}")

    n_k, n_q, n_h = inst.n_classes, inst.n_queues, inst.n_hosts
    draws = _Draws(np.random.Generator(np.random.PCG64(cfg.seed)))
    host = list(placement.host_of)
    delay = inst.delay.tolist()
    mean_service = (1.0 / mu).tolist()
    total_rate = inst.ext_rate.sum(axis=1)
    class_cum = np.cumsum(total_rate / total_rate.sum()).tolist()
    mean_gap = 1.0 / float(total_rate.sum())
    entry_cum = [np.cumsum(inst.ext_rate[k] / total_rate[k]).tolist() for k in range(n_k)]
    # routing: successors with positive probability only
    route = [[None] * n_q for _ in range(n_k)]
    for k in range(n_k):
        for q in range(n_q):
            succ = np.nonzero(inst.transfer[k, q])[0]
            route[k][q] = (succ.tolist(), np.cumsum(inst.transfer[k, q, succ]).tolist())

    n_total = cfg.warmup_requests + cfg.measured_requests
    req_class = np.empty(n_total, dtype=np.int64)
    req_start = np.empty(n_total)
    req_delay = np.full(n_total, np.nan)

    waiting = [deque() for _ in range(n_q)]
    in_system = [0] * n_q
    events: list = []
    seq = 0
    now = 0.0
    next_id = 0
    remaining = cfg.measured_requests

    # observation window: from first to last measured arrival
    t0 = t1 = None
    busy = [0.0] * n_q
    area = [0.0] * n_q
    last_change = [0.0] * n_q
    visits = [0] * n_q
    sojourn_sum = [0.0] * n_q
    sojourn_n = [0] * n_q
    hop_count = np.zeros((n_h, n_h))
    hop_times: list[tuple[float, int, int]] = []
    arrived_at = [deque() for _ in range(n_q)]  # FCFS, so visits leave in arrival order
    service_start = [0.0] * n_q

    def window(a, b):
        # overlap of [a, b] with the observation window
        if t0 is None:
            return 0.0
        hi = b if t1 is None else min(b, t1)
        return max(0.0, hi - max(a, t0))

    def enter(r, q, t):
        nonlocal seq
        area[q] += in_system[q] * window(last_change[q], t)
        last_change[q] = t
        in_system[q] += 1
        if in_system[q] > cfg.backlog_bound:
            raise Unstable(f"queue {inst.queue_ids[q]} backlog exceeded {cfg.backlog_bound}")
        arrived_at[q].append(t)
        if t0 is not None and (t1 is None or t <= t1):
            visits[q] += 1
        if in_system[q] == 1:
            service_start[q] = t
            seq += 1
            heapq.heappush(events, (t + mean_service[q] * draws.exp(), seq, _DEPARTURE, q, r))
        else:
            waiting[q].append(r)

    heapq.heappush(events, (mean_gap * draws.exp(), 0, _ARRIVAL, -1, -1))
    while events:
        now, _, kind, q, r = heapq.heappop(events)
        if kind == _ARRIVAL:
            r = next_id
            next_id += 1
            k = _pick(class_cum, draws.uniform())
            k = min(k, n_k - 1)
            req_class[r] = k
            req_start[r] = now
            if r == cfg.warmup_requests:
                t0 = now
            if r == n_total - 1:
                t1 = now
            entry = min(_pick(entry_cum[k], draws.uniform()), n_q - 1)
            if next_id < n_total:
                seq += 1
                heapq.heappush(events, (now + mean_gap * draws.exp(), seq, _ARRIVAL, -1, -1))
            enter(r, entry, now)
        elif kind == _HOP:
            enter(r, q, now)
        else:
            area[q] += in_system[q] * window(last_change[q], now)
            last_change[q] = now
            busy[q] += window(service_start[q], now)
            in_system[q] -= 1
            t_in = arrived_at[q].popleft()
            if t0 is not None and t_in >= t0 and (t1 is None or t_in <= t1):
                sojourn_sum[q] += now - t_in
                sojourn_n[q] += 1
            if waiting[q]:
                nxt = waiting[q].popleft()
                service_start[q] = now
                seq += 1
                heapq.heappush(events, (now + mean_service[q] * draws.exp(), seq, _DEPARTURE, q, nxt))
            k = int(req_class[r])
            succ, cum = route[k][q]
            j = _pick(cum, draws.uniform()) if succ else 0
            if j == len(succ):
                req_delay[r] = now - req_start[r]
                if r >= cfg.warmup_requests:
                    remaining -= 1
                    if remaining == 0:
                        break
                continue
            nq = succ[j]
            d = delay[host[q]][host[nq]]
            if d > 0:
                if t0 is not None and (t1 is None or now <= t1):
                    hop_count[host[q], host[nq]] += 1
                    hop_times.append((now, host[q], host[nq]))
                seq += 1
                heapq.heappush(events, (now + d, seq, _HOP, nq, r))
            else:
                enter(r, nq, now)

    duration = (t1 - t0) if (t0 is not None and t1 is not None and t1 > t0) else float("nan")
    for q in range(n_q):
        area[q] += in_system[q] * window(last_change[q], min(now, t1 if t1 is not None else now))
        if in_system[q] > 0:
            busy[q] += window(service_start[q], now)

    # batch means over the measured requests, in arrival order
    measured = slice(cfg.warmup_requests, n_total)
    cls = req_class[measured]
    dl = req_delay[measured]
    batches = np.array_split(np.arange(cfg.measured_requests), cfg.batch_count)
    mean = np.zeros(n_k)
    half = np.zeros(n_k)
    count = np.zeros(n_k, dtype=int)
    for k in range(n_k):
        means = []
        for b in batches:
            sel = dl[b][cls[b] == k]
            if sel.size:
                means.append(sel.mean())
        count[k] = int(np.sum(cls == k))
        if len(means) >= 2:
            means = np.array(means)
            mean[k] = means.mean()
            se = means.std(ddof=1) / np.sqrt(len(means))
            half[k] = stats.t.ppf(0.5 + cfg.confidence / 2, len(means) - 1) * se
        else:
            mean[k] = np.nan
            half[k] = np.inf

    flow = hop_count / duration
    flow_se = _batch_flow_se(hop_times, t0, t1, n_h, cfg.batch_count)
    return SimReport(
        class_ids=inst.class_ids, mean_delay=mean, half_width=half, samples=count,
        link_flow=flow, link_flow_se=flow_se,
        utilization=np.array(busy) / duration,
        utilization_expected=traffic.big_lambda / mu,
        queue_rate=np.array(visits) / duration,
        queue_sojourn=np.array(sojourn_sum) / np.maximum(sojourn_n, 1),
        queue_population=np.array(area) / duration,
        duration=float(duration), seed=cfg.seed, config=cfg,
    )


def _batch_flow_se(hop_times, t0, t1, n_h, n_batches) -> np.ndarray:
    if t0 is None or t1 is None or t1 <= t0:
        return np.full((n_h, n_h), np.inf)
    edges = np.linspace(t0, t1, n_batches + 1)
    width = edges[1] - edges[0]
    rates = np.zeros((n_batches, n_h, n_h))
    for t, h, l in hop_times:
        b = min(int((t - t0) / width), n_batches - 1)
        rates[b, h, l] += 1
    rates /= width
    return rates.std(axis=0, ddof=1) / np.sqrt(n_batches)


@dataclass(frozen=True)
class Verdict:
    class_id: str
    analytic: float
    simulated: float
    half_width: float
    deviation: float  # relative, (simulated - analytic) / analytic
    passed: bool

    @property
    def label(self) -> str:
        return "PASS" if self.passed else "FAIL"


def compare_to_analytic(report: SimReport, analytic: DelayBreakdown, slack: float = 0.02) -> list[Verdict]:
    """PASS when the analytic delay lies in the CI widened by ``slack`` (relative)."""
    out = []
    for k, cid in enumerate(report.class_ids):
        a = float(analytic.total[k])
        lo, hi = report.interval(k)
        ok = bool(lo * (1 - slack) <= a <= hi * (1 + slack))
        dev = (report.mean_delay[k] - a) / a if a else float("nan")
        out.append(Verdict(cid, a, float(report.mean_delay[k]), float(report.half_width[k]), float(dev), ok))
    return out
