import math

import numpy as np
import pytest

from vnfplace.scenario import ScenarioError, apply_sweep, corpus_names, load_scenario, parse_scenario

BASE = """\
schema_version: 1
id: tiny
hosts:
  - {id: a, kappa: 10}
  - {id: b, kappa: 8}
links:
  delay: 4
vnfs:
  - {id: x}
  - {id: y}
classes:
  - id: k
    qos_delay_ms: 20
    external_rates: {x: 1.5}
    transfer:
      x: {y: 1}
"""


def issues(text):
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(text, "t.yaml")
    return exc.value.issues


def test_minimal_scenario():
    sc = parse_scenario(BASE)
    inst = sc.instance
    assert sc.id == "tiny" and inst.host_ids == ("a", "b") and inst.queue_ids == ("x", "y")
    np.testing.assert_allclose(inst.delay, [[0, 4], [4, 0]])
    assert np.all(np.isinf(inst.capacity[~np.eye(2, dtype=bool)]))
    assert inst.transfer[0, 0, 1] == 1.0
    assert sc.sweep is None and sc.placement is None


def test_link_pairs_override_and_asymmetry():
    links = "  delay: 4\n  capacity: 3\n  pairs:\n    - {from: a, to: b, delay: 9, symmetric: false}\n"
    text = BASE.replace("  delay: 4\n", links)
    inst = parse_scenario(text).instance
    assert inst.delay[0, 1] == 9 and inst.delay[1, 0] == 4
    assert inst.capacity[0, 1] == 3


def test_missing_schema_version():
    found = issues(BASE.replace("schema_version: 1\n", ""))
    assert any("schema_version" in i.message or i.path == "schema_version" for i in found)


def test_wrong_schema_version():
    found = issues(BASE.replace("schema_version: 1", "schema_version: 7"))
    assert found[0].line == 1 and "unsupported version" in found[0].message


def test_unknown_key_rejected_with_line():
    text = BASE.replace("  - {id: b, kappa: 8}", "  - {id: b, kappa: 8, ram: 4}")
    found = issues(text)
    assert len(found) == 1
    assert found[0].line == 5 and "ram" in found[0].message


def test_unknown_vnf_reference_has_line():
    text = BASE.replace("x: {y: 1}", "x: {zz: 1}")
    found = issues(text)
    assert found[0].line == 16 and "zz" in found[0].message


def test_stochastic_violation_reported_with_class_line():
    text = BASE.replace("x: {y: 1}", "x: {y: 1.5}")
    found = issues(text)
    assert any(i.line is not None and i.line >= 11 and "x" in i.path for i in found)


def test_yaml_syntax_error_has_line():
    found = issues(BASE.replace("  - {id: b, kappa: 8}", "  - {id: b, kappa: 8"))
    assert found[0].line is not None


def test_several_errors_reported_together():
    text = BASE.replace("kappa: 10", "kappa: -1").replace("qos_delay_ms: 20", "qos_delay_ms: zero")
    found = issues(text)
    assert len(found) >= 2
    msg = str(ScenarioError(found, "t.yaml"))
    assert "t.yaml:4" in msg and "t.yaml:13" in msg


def test_empty_document():
    assert issues("")[0].path == "<root>"


def test_sweep_block():
    text = BASE + "sweep:\n  parameter: links.delay\n  values: [50, 100]\n"
    sc = parse_scenario(text)
    assert sc.sweep.values == (50.0, 100.0)
    assert sc.at(100).delay[0, 1] == 100
    assert sc.at(None) is sc.instance


def test_bad_sweep_parameter():
    found = issues(BASE + "sweep:\n  parameter: hosts.kappa\n  values: [1]\n")
    assert found[0].line == 18 and "unknown parameter" in found[0].message


def test_rate_sweep_infeasible_value_is_an_input_error():
    # external rate scaled so the class becomes non-positive is rejected up front
    found = issues(BASE + "sweep:\n  parameter: classes.rate_scale\n  values: [1, 0]\n")
    assert found


def test_apply_sweep_forms():
    raw = parse_scenario(BASE).raw
    assert apply_sweep(raw, "links.delay_scale", 2.0).links.delay[0][1] == 8
    assert apply_sweep(raw, "classes.rate_scale", 2.0).classes[0].external_rate == {"x": 3.0}
    with pytest.raises(ValueError):
        apply_sweep(raw, "nope", 1.0)


def test_instance_count_and_split():
    text = BASE.replace("  - {id: y}", "  - {id: y, instance_count: 2}") + "split:\n  y: [0.25, 0.75]\n"
    sc = parse_scenario(text)
    assert list(sc.instance.instance_count) == [1, 2]
    assert sc.split == {"y": (0.25, 0.75)}


def test_placement_block_checks_ids():
    ok = parse_scenario(BASE + "placement:\n  x: a\n  y: b\n")
    assert ok.placement == {"x": "a", "y": "b"}
    found = issues(BASE + "placement:\n  x: a\n  y: c\n")
    assert "unknown host" in found[0].message
    found = issues(BASE + "placement:\n  x: a\n")
    assert "no host given" in found[0].message


def test_options_block():
    sc = parse_scenario(BASE + "options:\n  stability_margin: 0.01\n  enforce_link_capacity: true\n")
    assert sc.instance.stability_margin == 0.01 and sc.instance.enforce_link_capacity


def test_load_missing_file():
    with pytest.raises(ScenarioError):
        load_scenario("/nonexistent/scenario.yaml")


@pytest.mark.parametrize("name", corpus_names())
def test_corpus_parses(name):
    sc = load_scenario(name)
    assert sc.id == name
    assert sc.description
    if sc.sweep is not None:
        for v in sc.sweep.values:
            sc.at(v)


def test_corpus_contents():
    names = set(corpus_names())
    assert {"three-services", "two-host-low-delay", "two-host-high-delay", "chain-delay", "light-mesh-delay",
            "heavy-mesh-delay", "multiclass-heavy-mesh", "extreme-mesh-degree4", "extreme-mesh-degree6",
            "shared-queue", "split-two-hosts"} <= names
    for name in ("chain-delay", "light-mesh-delay", "heavy-mesh-delay"):
        sc = load_scenario(name)
        assert sc.instance.n_hosts == 3 and np.all(sc.instance.kappa == 10)
        assert sc.sweep.parameter == "links.delay"
        np.testing.assert_allclose(sc.sweep.values, np.linspace(50, 400, 8))
    for name in ("chain-rate", "light-mesh-rate", "heavy-mesh-rate"):
        sc = load_scenario(name)
        assert sc.sweep.parameter == "classes.rate_scale" and len(sc.sweep.values) == 8
    multi = load_scenario("multiclass-heavy-mesh").instance
    assert sorted(multi.qos) == [10, 45, 2000]
    for name, degree in (("extreme-mesh-degree4", 4), ("extreme-mesh-degree6", 6)):
        inst = load_scenario(name).instance
        assert inst.n_hosts == 20
        # one physical link costs 50 ms; other pairs pay for several
        assert np.all((inst.delay == 50).sum(axis=1) == degree)
    heavy = load_scenario("multi-instance-heavy-mesh").instance
    counts = dict(zip(heavy.queue_ids, heavy.instance_count))
    assert [q for q, n in counts.items() if n == 2] == ["v4", "v6"]
    assert math.isclose(load_scenario("two-host-low-delay").instance.kappa[0], 0.005)
