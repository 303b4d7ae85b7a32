import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vnfplace.model import (Host, InvalidInstance, IssueKind, LinkMatrix, Placement, ProblemInstance, ServiceClass,
                            VnfQueue, feasible_capacity_check, spectral_radius, validate_instance)

from conftest import chain_class, make, two_host


def kinds(exc):
    return {i.kind for i in exc.value.issues}


def test_valid_chain():
    inst = two_host()
    assert inst.n_hosts == 2 and inst.n_queues == 2
    assert inst.transfer[0, 0, 1] == 1.0
    assert inst.spectral_radius[0] == pytest.approx(0.0)
    np.testing.assert_allclose(inst.entry_prob[0], [1.0, 0.0])


def test_row_sum_above_one_is_rejected():
    bad = ServiceClass("k", {"q1": 1.0}, {"q1": {"q1": 0.5, "q2": 0.7}}, 10.0)
    with pytest.raises(InvalidInstance) as exc:
        make([5], 0, ["q1", "q2"], [bad])
    assert IssueKind.NON_STOCHASTIC_ROUTING in kinds(exc)


def test_self_loop_never_exits():
    bad = ServiceClass("k", {"q1": 1.0}, {"q1": {"q1": 1.0}}, 10.0)
    with pytest.raises(InvalidInstance) as exc:
        make([5], 0, ["q1"], [bad])
    assert IssueKind.ABSORBING_ROUTING in kinds(exc)


def test_every_issue_reported_with_location():
    hosts = [Host("a", -1.0)]
    cls = ServiceClass("k", {"q1": 1.0}, {"q1": {"q1": 1.2}}, -3.0)
    raw = ProblemInstance(hosts, LinkMatrix.uniform(2, 1.0), [VnfQueue("q1", 0)], [cls])
    with pytest.raises(InvalidInstance) as exc:
        validate_instance(raw)
    found = kinds(exc)
    assert {IssueKind.NEGATIVE_PARAMETER, IssueKind.DIMENSION_MISMATCH, IssueKind.NON_STOCHASTIC_ROUTING} <= found
    assert all(i.location for i in exc.value.issues)


def test_unknown_queue_reference():
    bad = ServiceClass("k", {"q1": 1.0}, {"q1": {"nope": 1.0}}, 10.0)
    with pytest.raises(InvalidInstance):
        make([5], 0, ["q1"], [bad])


def test_entry_probabilities_must_match_rates():
    bad = ServiceClass("k", {"q1": 1.0, "q2": 1.0}, {}, 10.0, entry_prob={"q1": 0.9, "q2": 0.1})
    with pytest.raises(InvalidInstance) as exc:
        make([5], 0, ["q1", "q2"], [bad])
    assert IssueKind.INCONSISTENT_ENTRY in kinds(exc)
    ok = ServiceClass("k", {"q1": 1.0, "q2": 3.0}, {}, 10.0, entry_prob={"q1": 0.25, "q2": 0.75})
    make([5], 0, ["q1", "q2"], [ok])


def test_all_zero_external_rate_rejected():
    bad = ServiceClass("k", {"q1": 0.0}, {}, 10.0)
    with pytest.raises(InvalidInstance):
        make([5], 0, ["q1"], [bad])


def test_nonzero_self_delay_rejected():
    with pytest.raises(InvalidInstance) as exc:
        make([5, 5], [[1.0, 2.0], [2.0, 0.0]], ["q1"], [chain_class("k", ["q1"])])
    assert IssueKind.NEGATIVE_PARAMETER in kinds(exc) or IssueKind.DIMENSION_MISMATCH in kinds(exc)


def test_validation_is_idempotent():
    inst = two_host()
    again = validate_instance(inst)
    assert again == inst
    assert validate_instance(inst.source) == inst


def test_validated_arrays_are_read_only():
    inst = two_host()
    with pytest.raises(ValueError):
        inst.kappa[0] = 1.0


@pytest.mark.parametrize("loads,expected", [((4.0, 5.0), True), ((6.0, 5.0), False), ((10.0,), False)])
def test_capacity_check(loads, expected):
    qids = [f"q{i}" for i in range(len(loads))]
    classes = [ServiceClass(f"k{i}", {q: lam}, {}, 10.0) for i, (q, lam) in enumerate(zip(qids, loads))]
    inst = make([10], 0, qids, classes)
    assert feasible_capacity_check(inst, Placement((0,) * len(loads))) is expected


def test_capacity_check_counts_margin_per_instance():
    # 4 + 6 = 10 leaves no room for the strict stability gap
    inst = make([10], 0, ["a", "b"], [ServiceClass("k", {"a": 4.0, "b": 6.0}, {}, 10.0)])
    assert not feasible_capacity_check(inst, Placement((0, 0)))


def test_placement_matrix_has_one_host_per_instance():
    a = Placement((1, 0, 1)).matrix(3)
    np.testing.assert_array_equal(a.sum(axis=0), 1.0)
    assert Placement((1, 0, 1)).hosts_used() == 2


def _char_poly_radius(m):
    roots = np.roots(np.poly(m))
    return float(np.max(np.abs(roots)))


@pytest.mark.parametrize("n", [2, 3])
def test_spectral_radius_matches_characteristic_roots(n):
    rng = np.random.default_rng(n)
    for _ in range(20):
        m = rng.random((n, n)) * (rng.random((n, n)) < 0.7)
        m = m / max(m.sum(axis=1).max(), 1e-9) * 0.95
        assert spectral_radius(m) == pytest.approx(_char_poly_radius(m), abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 32), st.integers(0, 2**32 - 1), st.floats(0.1, 0.99))
def test_spectral_radius_power_iteration(n, seed, scale):
    rng = np.random.default_rng(seed)
    m = rng.random((n, n)) * (rng.random((n, n)) < 0.5)
    rows = m.sum(axis=1)
    m = m / np.where(rows > 0, rows, 1.0)[:, None] * scale
    expected = float(np.max(np.abs(np.linalg.eigvals(m))))
    assert spectral_radius(m) == pytest.approx(expected, abs=1e-8)


def test_spectral_radius_periodic_and_nilpotent():
    perm = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert spectral_radius(perm) == pytest.approx(1.0, abs=1e-10)
    assert spectral_radius(np.array([[0.0, 1.0], [0.0, 0.0]])) == 0.0


def test_link_matrix_helpers():
    lm = LinkMatrix.uniform(3, 7.0)
    assert lm.delay[0][0] == 0.0 and lm.delay[0][2] == 7.0
    assert math.isinf(lm.capacity[1][2])
