from __future__ import annotations

import pytest

from oracles import brute_feasible
from pemsim.core import ConfigError, ServiceRequest, ShapeConstraint
from pemsim.oracle import Instance, check_instance, feasible, generate_suite, load_suite, run_suite


def r(rid, packets, lo, hi, shape=None):
    return ServiceRequest(rid, rid, packets, lo, hi, shape or ShapeConstraint.arbitrary())


def test_single_request_agrees():
    res = check_instance(Instance("one", (1, 1), (r("a", 2, 0, 1),)))
    assert res.decisions == [("a", True, True)]


def test_oversubscribed_both_reject():
    res = check_instance(Instance("over", (1, 1), (r("a", 2, 0, 1), r("b", 1, 0, 1))))
    assert res.decisions[1] == ("b", False, False)


def test_bounds_refused():
    with pytest.raises(ConfigError, match="horizon"):
        check_instance(Instance("big", (1,) * 9, (r("a", 1, 0, 1),)))
    with pytest.raises(ConfigError, match="packets"):
        check_instance(Instance("fat", (5,), (r("a", 5, 0, 0),)))


def test_feasible_matches_independent_enumeration():
    for inst in generate_suite(40, seed=3):
        reqs = [(q.packets, q.earliest_slot, q.deadline_slot, q.shape.kind.value, q.shape.cap) for q in inst.requests]
        assert feasible(inst.capacity, inst.requests) == brute_feasible(inst.capacity, reqs), inst.name


def test_bundled_suite_round_trip():
    suite = load_suite()
    assert len(suite) == 50
    assert [Instance.from_dict(i.to_dict()) for i in suite] == suite
    report = run_suite(suite)
    assert report.ok and report.unsound == 0


def test_load_suite_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ConfigError):
        load_suite(p)
    with pytest.raises(ConfigError):
        load_suite(tmp_path / "missing.json")
