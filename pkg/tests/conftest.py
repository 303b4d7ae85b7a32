"""Shared instance builders for the test suite."""

from __future__ import annotations

import math

import numpy as np
import pytest

from vnfplace.model import Host, LinkMatrix, ProblemInstance, ServiceClass, VnfQueue, validate_instance


def chain_class(cid, queues, rate=1.0, qos=50.0, probs=None):
    """Deterministic (or given-probability) chain through ``queues``."""
    probs = probs or [1.0] * (len(queues) - 1)
    trans = {p: {r: pr} for p, r, pr in zip(queues, queues[1:], probs)}
    return ServiceClass(cid, {queues[0]: rate}, trans, qos)


def make(kappas, delay, queues, classes, **kw):
    """Validated instance with uniform off-diagonal delay (or a full matrix)."""
    hosts = [Host(f"h{i + 1}", float(k)) for i, k in enumerate(kappas)]
    if np.ndim(delay) == 0:
        links = LinkMatrix.uniform(len(hosts), float(delay))
    else:
        links = LinkMatrix.from_arrays(delay)
    qs = [q if isinstance(q, VnfQueue) else VnfQueue(q) for q in queues]
    return validate_instance(ProblemInstance(hosts, links, qs, classes, **kw))


def two_host(delay=5.0):
    """Two hosts of capacity 5, chain q1 -> q2, unit rate, QoS 50 ms."""
    return make([5, 5], delay, ["q1", "q2"], [chain_class("k", ["q1", "q2"], 1.0, 50.0)])


def random_instance(rng: np.random.Generator, n_hosts=3, n_queues=4, n_classes=2, *, load=0.5, delay=(1, 20),
                    self_loops=False):
    """Random small feasible instance: random routing, moderate total load."""
    qids = [f"q{i + 1}" for i in range(n_queues)]
    classes = []
    for k in range(n_classes):
        entry = qids[int(rng.integers(n_queues))]
        trans = {}
        for p in qids:
            w = rng.random(n_queues) * (rng.random(n_queues) < 0.5)
            if not self_loops:
                w[qids.index(p)] = 0.0
            if w.sum() == 0:
                continue
            w = w / w.sum() * rng.uniform(0.3, 0.9)
            trans[p] = {r: float(x) for r, x in zip(qids, w) if x > 0}
        classes.append(ServiceClass(f"k{k + 1}", {entry: float(rng.uniform(0.2, 1.0))}, trans,
                                    float(rng.uniform(5, 60))))
    d = rng.uniform(*delay, size=(n_hosts, n_hosts))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    probe = make([1.0] * n_hosts, d, qids, classes)
    from vnfplace.traffic import solve_traffic
    lam = solve_traffic(probe).big_lambda
    kappa = math.ceil(max(lam.sum() / (load * n_hosts), 1.5 * lam.max()) + 1)
    return make([kappa] * n_hosts, d, qids, classes)


@pytest.fixture
def ex2():
    return two_host(5.0)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
