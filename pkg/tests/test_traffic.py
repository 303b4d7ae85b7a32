import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vnfplace.model import CpuAllocation, Placement, ServiceClass, UnstableQueue, validate_instance
from vnfplace.scenario import load_scenario
from vnfplace.traffic import (_network_term_distinct, class_delays, link_flows, network_latency, response_time,
                              solve_traffic)

from conftest import chain_class, make, random_instance, two_host


def sample_paths(inst, k, placement, n_paths, seed=0, max_hops=10_000):
    """Monte-Carlo walk of class-k requests through the routing chain.

    Returns per-path visit counts (self-loops not counted as new visits),
    per-path hop latency, and per-path host-pair hop counts [path, h, l].
    """
    rng = np.random.default_rng(seed)
    n_q = inst.n_queues
    hosts = np.asarray(placement.host_of)
    cum = np.cumsum(inst.transfer[k], axis=1)
    state = rng.choice(n_q, size=n_paths, p=inst.entry_prob[k])
    visits = np.zeros((n_paths, n_q))
    visits[np.arange(n_paths), state] += 1
    latency = np.zeros(n_paths)
    hops = np.zeros((n_paths, inst.n_hosts, inst.n_hosts))
    alive = np.ones(n_paths, dtype=bool)
    for _ in range(max_hops):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        u = rng.random(idx.size)
        cur = state[idx]
        nxt = (u[:, None] >= cum[cur]).sum(axis=1)
        leaving = nxt == n_q
        alive[idx[leaving]] = False
        idx, cur, nxt = idx[~leaving], cur[~leaving], nxt[~leaving]
        moved = nxt != cur
        visits[idx[moved], nxt[moved]] += 1
        latency[idx] += inst.delay[hosts[cur], hosts[nxt]]
        np.add.at(hops, (idx, hosts[cur], hosts[nxt]), 1)
        state[idx] = nxt
    return visits, latency, hops


def within(estimate_samples, value, k_se=3.0):
    mean = estimate_samples.mean()
    se = estimate_samples.std(ddof=1) / np.sqrt(len(estimate_samples))
    return abs(mean - value) <= k_se * se + 1e-12


def test_chain_rates_and_visits():
    inst = two_host()
    t = solve_traffic(inst)
    np.testing.assert_allclose(t.gamma[0], [1, 1])
    np.testing.assert_allclose(t.lambda_hat[0], [1, 1])


def test_branch_visits():
    cls = ServiceClass("gaming", {"f": 1.0}, {"f": {"a": 0.9, "b": 0.1}}, 45.0)
    inst = make([10], 0, ["f", "a", "b"], [cls])
    np.testing.assert_allclose(solve_traffic(inst).gamma[0], [1.0, 0.9, 0.1])


def loop_instance():
    cls = ServiceClass("k", {"q1": 1.0}, {"q1": {"q2": 1.0}, "q2": {"q3": 0.9}, "q3": {"q1": 0.2}}, 10.0)
    return make([10, 10], 3.0, ["q1", "q2", "q3"], [cls])


def test_loop_visits_match_monte_carlo():
    inst = loop_instance()
    gamma = solve_traffic(inst).gamma[0]
    visits, _, _ = sample_paths(inst, 0, Placement((0, 0, 0)), 1_000_000, seed=1)
    for q in range(3):
        assert within(visits[:, q], gamma[q])


def test_response_time():
    assert response_time(2, 1) == 1.0
    assert response_time(10, 0) == 0.1
    with pytest.raises(UnstableQueue):
        response_time(1, 1)


def test_network_latency_colocated_is_zero():
    inst = loop_instance()
    assert np.all(network_latency(inst, solve_traffic(inst), Placement((0, 0, 0))) == 0)


def test_network_latency_two_host_chain():
    inst = two_host(5.0)
    assert network_latency(inst, solve_traffic(inst), Placement((0, 1)))[0] == pytest.approx(5.0)


def three_services():
    sc = load_scenario("three-services")
    return sc.instance, sc


def fixed_placement(sc):
    host_index = {h: i for i, h in enumerate(sc.instance.host_ids)}
    return Placement(tuple(host_index[sc.placement[q]] for q in sc.instance.queue_ids))


def test_network_latency_three_services_matches_monte_carlo():
    inst, sc = three_services()
    placement = fixed_placement(sc)
    t = solve_traffic(inst)
    lat = network_latency(inst, t, placement)
    for k in range(inst.n_classes):
        _, sampled, _ = sample_paths(inst, k, placement, 1_000_000, seed=10 + k)
        assert within(sampled, lat[k]), inst.class_ids[k]


def test_link_flows_match_monte_carlo():
    inst, sc = three_services()
    placement = fixed_placement(sc)
    flows = link_flows(inst, solve_traffic(inst), placement).flow
    mean = np.zeros_like(flows)
    var = np.zeros_like(flows)
    n = 200_000
    for k in range(inst.n_classes):
        rate = inst.ext_rate[k].sum()
        _, _, hops = sample_paths(inst, k, placement, n, seed=20 + k)
        mean += rate * hops.mean(axis=0)
        var += rate**2 * hops.var(axis=0, ddof=1) / n
    off = ~np.eye(inst.n_hosts, dtype=bool)
    assert np.all(np.abs(mean - flows)[off] <= 3 * np.sqrt(var[off]) + 1e-12)
    assert flows[off].sum() > 0


def test_link_flows_simple():
    inst = two_host()
    t = solve_traffic(inst)
    assert np.all(link_flows(inst, t, Placement((0, 0))).flow == 0)
    f = link_flows(inst, t, Placement((0, 1))).flow
    assert f[0, 1] == pytest.approx(1.0) and f[1, 0] == 0


def test_link_flow_violation_recorded():
    from vnfplace.model import LinkMatrix, ProblemInstance
    inst = two_host()
    raw = inst.source
    capped = validate_instance(ProblemInstance(raw.hosts, LinkMatrix.uniform(2, 5.0, capacity=0.5), raw.queues,
                                               raw.classes))
    lf = link_flows(capped, solve_traffic(capped), Placement((0, 1)))
    assert not lf.ok and lf.violations[0][:2] == (0, 1)


def test_class_delays_single_queue():
    inst = make([2], 0, ["q"], [ServiceClass("k", {"q": 1.0}, {}, 4.0)])
    d = class_delays(inst, solve_traffic(inst), Placement((0,)), CpuAllocation([2.0]))
    assert d.total[0] == pytest.approx(1.0) and d.ratio[0] == pytest.approx(0.25)


def test_class_delays_example_two_hosts():
    inst = two_host(5.0)
    d = class_delays(inst, solve_traffic(inst), Placement((0, 1)), CpuAllocation([5.0, 5.0]))
    assert d.total[0] == pytest.approx(5.5)
    assert d.ratio[0] == pytest.approx(0.11)
    assert d.objective == pytest.approx(0.11)


def test_class_delays_unstable():
    inst = two_host()
    with pytest.raises(UnstableQueue):
        class_delays(inst, solve_traffic(inst), Placement((0, 1)), CpuAllocation([1.0, 5.0]))


# ---------------------------------------------------------------------------
# properties

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_flow_conservation(seed):
    inst = random_instance(np.random.default_rng(seed))
    t = solve_traffic(inst)
    for k in range(inst.n_classes):
        rhs = inst.ext_rate[k] + inst.transfer[k].T @ t.lambda_hat[k]
        np.testing.assert_allclose(t.lambda_hat[k], rhs, atol=1e-9)
        assert np.all(t.lambda_hat[k] >= inst.ext_rate[k] - 1e-12)
        # rates equal total external rate times visits when there are no self-loops
        if not np.any(np.diag(inst.transfer[k])):
            np.testing.assert_allclose(t.lambda_hat[k], inst.ext_rate[k].sum() * t.gamma[k], atol=1e-8)
    np.testing.assert_allclose(t.big_lambda, t.lambda_hat.sum(axis=0))


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_rate_scaling_is_linear(seed):
    inst = random_instance(np.random.default_rng(seed))
    raw = inst.source
    doubled = [ServiceClass(c.id, {q: 2 * r for q, r in c.external_rate.items()}, c.transfer_prob, c.qos_delay)
               for c in raw.classes]
    from dataclasses import replace
    inst2 = validate_instance(replace(raw, classes=doubled))
    a, b = solve_traffic(inst), solve_traffic(inst2)
    np.testing.assert_allclose(b.lambda_hat, 2 * a.lambda_hat, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(b.big_lambda, 2 * a.big_lambda, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(b.gamma, a.gamma, rtol=1e-12, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(0, 3), st.floats(1.01, 2.0))
def test_delay_decreases_in_mu(seed, q, factor):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng)
    t = solve_traffic(inst)
    placement = Placement(tuple(int(h) for h in rng.integers(inst.n_hosts, size=inst.n_queues)))
    mu = t.big_lambda + rng.uniform(0.5, 2.0, size=inst.n_queues)
    base = class_delays(inst, t, placement, CpuAllocation(mu))
    mu2 = mu.copy()
    mu2[q] *= factor
    faster = class_delays(inst, t, placement, CpuAllocation(mu2))
    for k in range(inst.n_classes):
        if t.gamma[k, q] > 0:
            assert faster.total[k] < base.total[k]
        else:
            assert faster.total[k] == base.total[k]
    assert base.objective == max(base.ratio)
    np.testing.assert_allclose(base.total, base.processing + base.network)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_network_term_forms_agree(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng)
    t = solve_traffic(inst)
    placement = Placement(tuple(int(h) for h in rng.integers(inst.n_hosts, size=inst.n_queues)))
    np.testing.assert_allclose(network_latency(inst, t, placement), _network_term_distinct(inst, t, placement))
