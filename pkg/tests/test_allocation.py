import networkx as nx
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from vnfplace.allocation import (InfeasiblePlacement, LinkCapacityViolated, PreconditionViolated, allocate,
                                 build_criticality_graph, full_load_solve, is_strongly_connected, optimize_allocation,
                                 optimum_checks, strongly_connected_components)
from vnfplace.model import LinkMatrix, Placement, ProblemInstance, ServiceClass, validate_instance
from vnfplace.scenario import load_scenario
from vnfplace.traffic import solve_traffic

from conftest import make, random_instance, two_host
from test_convex import golden_section


def fixed(sc):
    idx = {h: i for i, h in enumerate(sc.instance.host_ids)}
    return Placement(tuple(idx[sc.placement[q]] for q in sc.instance.queue_ids))


def test_single_queue_uses_all_capacity():
    inst = make([10], 0, ["q"], [ServiceClass("k", {"q": 1.0}, {}, 1.0)])
    for res in (optimize_allocation(inst, Placement((0,))), allocate(inst, Placement((0,)))):
        assert res.alloc.mu[0] == pytest.approx(10.0, abs=1e-6)
        assert res.delays.total[0] == pytest.approx(1 / 9, rel=1e-6)


def test_two_host_example_saturates_both():
    inst = two_host(5.0)
    res = optimize_allocation(inst, Placement((0, 1)))
    np.testing.assert_allclose(res.alloc.mu, [5.0, 5.0], atol=1e-6)
    assert res.delays.total[0] == pytest.approx(5.5, rel=1e-6)
    # oracle: moving capacity off either host can only hurt
    best = golden_section(lambda m: 1 / (m - 1) + 0.25 + 5, 1 + 1e-6, 5.0)
    assert best == pytest.approx(5.0, abs=1e-5)


def test_colocated_two_host_example_matches_golden_section():
    inst = two_host(5.0)
    res = optimize_allocation(inst, Placement((0, 0)))
    m1 = golden_section(lambda m: 1 / (m - 1) + 1 / (5 - m - 1), 1 + 1e-7, 4 - 1e-7)
    assert res.alloc.mu[0] == pytest.approx(m1, abs=1e-5)
    assert res.rho == pytest.approx((1 / (m1 - 1) + 1 / (4 - m1)) / 50, rel=1e-6)


def test_two_chains_share_a_host_equalises_ratios():
    a = ServiceClass("fast", {"a": 1.0}, {}, 10.0)
    b = ServiceClass("slow", {"b": 2.0}, {}, 2000.0)
    inst = make([10], 0, ["a", "b"], [a, b])
    placement = Placement((0, 0))
    assert is_strongly_connected(build_criticality_graph(inst, placement))
    res = optimize_allocation(inst, placement)

    def worst(m):
        return max(1 / (m - 1) / 10, 1 / (10 - m - 2) / 2000)
    m = golden_section(worst, 1 + 1e-7, 8 - 1e-7)
    assert res.alloc.mu[0] == pytest.approx(m, abs=1e-5)
    assert res.delays.ratio[0] == pytest.approx(res.delays.ratio[1], rel=1e-5)
    fast = full_load_solve(inst, placement)
    np.testing.assert_allclose(fast.alloc.mu, res.alloc.mu, rtol=1e-5)


def test_overloaded_placement_rejected():
    inst = make([5], 0, ["a", "b"], [ServiceClass("k", {"a": 3.0, "b": 3.0}, {}, 10.0)])
    with pytest.raises(InfeasiblePlacement):
        optimize_allocation(inst, Placement((0, 0)))


def test_link_capacity_enforced_only_when_asked():
    raw = two_host().source
    capped = ProblemInstance(raw.hosts, LinkMatrix.uniform(2, 5.0, capacity=0.5), raw.queues, raw.classes,
                             enforce_link_capacity=True)
    with pytest.raises(LinkCapacityViolated):
        optimize_allocation(validate_instance(capped), Placement((0, 1)))
    loose = ProblemInstance(raw.hosts, capped.links, raw.queues, raw.classes)
    optimize_allocation(validate_instance(loose), Placement((0, 1)))


def test_certificate_on_example():
    res = optimize_allocation(two_host(), Placement((0, 1)))
    cert = res.certificate
    assert cert.max_residual() <= 1e-6
    assert abs(cert.m_class.sum() - 1) <= 1e-6
    assert cert.min_multiplier() >= -1e-9
    np.testing.assert_allclose(cert.m_queue, 0.0, atol=1e-6)
    assert cert.rho == pytest.approx(res.rho)


# ---------------------------------------------------------------------------
# criticality graph


def test_three_services_graph_is_strongly_connected():
    sc = load_scenario("three-services")
    g = build_criticality_graph(sc.instance, fixed(sc))
    assert is_strongly_connected(g)
    edges = g.edge_set()
    inst = sc.instance
    fw = inst.queue_ids.index("firewall")
    # the firewall serves several classes, so it has no edge back to a class
    assert not any(u == ("queue", fw) and v[0] == "class" for u, v in edges)
    # a queue used by one class only points back to it
    game = inst.queue_ids.index("game_server")
    gaming = inst.class_ids.index("game")
    assert (("queue", game), ("class", gaming)) in edges


def test_shared_queue_graph_not_strongly_connected():
    sc = load_scenario("shared-queue")
    g = build_criticality_graph(sc.instance, Placement((0,)))
    assert not is_strongly_connected(g)
    k1, k2 = g.index("class", 0), g.index("class", 1)
    assert k1 not in g.edges[k2] and g.index("queue", 0) in g.edges[k2]


def test_single_triangle_is_strongly_connected():
    inst = make([3], 0, ["q"], [ServiceClass("k", {"q": 1.0}, {}, 5.0)])
    g = build_criticality_graph(inst, Placement((0,)))
    assert is_strongly_connected(g)
    assert g.edge_set() == {(("class", 0), ("queue", 0)), (("queue", 0), ("class", 0)),
                            (("host", 0), ("queue", 0)), (("queue", 0), ("host", 0))}


def test_disjoint_triangles_are_not_strongly_connected():
    a = ServiceClass("ka", {"a": 1.0}, {}, 5.0)
    b = ServiceClass("kb", {"b": 1.0}, {}, 5.0)
    inst = make([3, 3], 1.0, ["a", "b"], [a, b])
    assert not is_strongly_connected(build_criticality_graph(inst, Placement((0, 1))))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 0.5), st.integers(0, 2**32 - 1))
def test_scc_matches_networkx(n, p, seed):
    rng = np.random.default_rng(seed)
    adj = rng.random((n, n)) < p
    edges = [tuple(int(v) for v in np.flatnonzero(adj[u])) for u in range(n)]
    ours = sorted(sorted(c) for c in strongly_connected_components(edges))
    g = nx.DiGraph()
    g.add_nodes_from(range(n))
    g.add_edges_from((u, v) for u in range(n) for v in edges[u])
    theirs = sorted(sorted(c) for c in nx.strongly_connected_components(g))
    assert ours == theirs


# ---------------------------------------------------------------------------
# full-load path


def test_full_load_three_services():
    sc = load_scenario("three-services")
    inst, placement = sc.instance, fixed(sc)
    traffic = solve_traffic(inst)
    fast = full_load_solve(inst, placement, traffic)
    slow = optimize_allocation(inst, placement, traffic)
    np.testing.assert_allclose(fast.alloc.mu, slow.alloc.mu, rtol=1e-5)
    assert fast.rho == pytest.approx(slow.rho, rel=1e-5)
    hosts = np.asarray(placement.host_of)
    for h in range(inst.n_hosts):
        assert fast.alloc.mu[hosts == h].sum() == pytest.approx(inst.kappa[h], rel=1e-9)
    checks = optimum_checks(inst, placement, traffic, slow)
    assert checks.critical_exists and checks.critical_hosts_strained and checks.strained_queues_serve_critical
    assert allocate(inst, placement, traffic).method == "full-load"


def test_full_load_single_queue():
    inst = make([4], 0, ["q"], [ServiceClass("k", {"q": 1.0}, {}, 5.0)])
    sol = full_load_solve(inst, Placement((0,)))
    assert sol.alloc.mu[0] == pytest.approx(4.0)
    assert sol.rho == pytest.approx(optimize_allocation(inst, Placement((0,))).rho, rel=1e-6)


def test_idle_queue_fails_full_load_precondition():
    inst = make([2], 0, ["a", "idle"], [ServiceClass("k", {"a": 0.4}, {}, 50.0)])
    placement = Placement((0, 0))
    assert is_strongly_connected(build_criticality_graph(inst, placement))
    with pytest.raises(PreconditionViolated):
        full_load_solve(inst, placement)
    res = allocate(inst, placement)
    assert res.method == "barrier" and res.alloc.mu[1] == pytest.approx(inst.stability_margin, abs=1e-6)


def test_shared_queue_equal_qos_all_critical():
    q1 = ServiceClass("k1", {"q": 0.5}, {}, 10.0)
    q2 = ServiceClass("k2", {"q": 0.5}, {}, 10.0)
    inst = make([4], 0, ["q"], [q1, q2])
    res = allocate(inst, Placement((0,)))
    assert res.method == "barrier"
    checks = optimum_checks(inst, Placement((0,)), solve_traffic(inst), res)
    assert checks.critical.all() and checks.strained[0]


def test_shared_queue_unequal_qos_uses_general_path():
    sc = load_scenario("shared-queue")
    with pytest.raises(PreconditionViolated):
        full_load_solve(sc.instance, Placement((0,)))
    res = allocate(sc.instance, Placement((0,)))
    assert res.method == "barrier"
    assert res.certificate.max_residual() <= 1e-6


# ---------------------------------------------------------------------------
# properties over random placements


def random_case(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, n_hosts=int(rng.integers(1, 4)), n_queues=int(rng.integers(1, 6)),
                           n_classes=int(rng.integers(1, 4)))
    placement = Placement(tuple(int(h) for h in rng.integers(inst.n_hosts, size=inst.n_queues)))
    return inst, placement


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kkt_certificate_random(seed):
    inst, placement = random_case(seed)
    traffic = solve_traffic(inst)
    assume(all(inst.kappa >= 0))
    from vnfplace.model import feasible_capacity_check
    assume(feasible_capacity_check(inst, placement, traffic.big_lambda))
    res = optimize_allocation(inst, placement, traffic)
    c = res.certificate
    assert c.max_residual() <= 1e-6
    assert abs(c.m_class.sum() - 1.0) <= 1e-6
    assert c.min_multiplier() >= -1e-9
    # only an idle VNF can sit on its stability bound
    busy = (traffic.gamma > 0).any(axis=0)
    np.testing.assert_allclose(c.m_queue[busy], 0.0, atol=1e-6)
    # epigraph value agrees with recomputed delays
    assert res.delays.objective == pytest.approx(res.rho, rel=1e-6)
    checks = optimum_checks(inst, placement, traffic, res)
    assert checks.critical_exists
    assert checks.critical_hosts_strained
    assert checks.strained_queues_serve_critical
    assert np.all(res.alloc.mu > traffic.big_lambda)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fast_path_equivalence(seed):
    inst, placement = random_case(seed)
    traffic = solve_traffic(inst)
    from vnfplace.model import feasible_capacity_check
    assume(feasible_capacity_check(inst, placement, traffic.big_lambda))
    assume(is_strongly_connected(build_criticality_graph(inst, placement, traffic)))
    assume((traffic.gamma > 0).any(axis=0).all())
    fast = full_load_solve(inst, placement, traffic)
    slow = optimize_allocation(inst, placement, traffic)
    np.testing.assert_allclose(fast.alloc.mu, slow.alloc.mu, rtol=1e-5)
    assert fast.rho == pytest.approx(slow.rho, rel=1e-5)
