from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_feasible, slices
from pemsim.core import ConfigError, ServiceRequest, ShapeConstraint, ShapeKind
from pemsim.resources import StorageState
from pemsim.server import (
    ClassPolicy,
    Commitment,
    EmergencyBudget,
    InventoryForecast,
    Verdict,
    admit,
    allocate,
    check_shares,
    classify,
    compute_availability,
    handle_emergency,
    plan_slices,
    plan_storage,
    project_extension,
)

SHAPES = {
    "contiguous": ShapeConstraint.contiguous,
    "arbitrary": ShapeConstraint.arbitrary,
}


def req(rid, packets, lo, hi, shape="arbitrary", cap=None, **kw) -> ServiceRequest:
    s = ShapeConstraint.per_slot_cap(cap) if shape == "per_slot_cap" else SHAPES[shape]()
    return ServiceRequest(rid, rid.split("#")[0], packets, lo, hi, s, **kw)


def as_tuple(r: ServiceRequest) -> tuple:
    return (r.packets, r.earliest_slot, r.deadline_slot, r.shape.kind.value, r.shape.cap)


def plans_respect(inv: InventoryForecast, capacity) -> bool:
    used = [0] * len(capacity)
    for c in inv.commitments.values():
        r = c.request
        assert sum(c.plan.values()) == c.remaining
        assert all(r.earliest_slot <= t <= r.deadline_slot for t in c.plan)
        assert all(n <= r.shape.max_per_slot(r.packets) for n in c.plan.values())
        if c.contiguous:
            ts = sorted(c.plan)
            assert ts[-1] - ts[0] + 1 == len(ts)
        for t, n in c.plan.items():
            used[t] += n
    return all(u <= cap for u, cap in zip(used, capacity))


# admission


def test_admit_examples():
    inv = InventoryForecast([2] * 5, horizon=5)
    assert admit(req("a", 5, 0, 4), inv, 0).accepted
    inv = InventoryForecast([2] * 5, horizon=5)
    d = admit(req("b", 11, 0, 4), inv, 0)
    assert d.verdict is Verdict.REJECT and d.hint.max_packets_feasible_now == 10
    zero = InventoryForecast([0] * 5, horizon=5)
    for r in (req("c", 1, 0, 4), req("d", 2, 1, 3, "contiguous"), req("e", 3, 0, 4, "per_slot_cap", 2)):
        assert not admit(r, zero, 0).accepted


def test_admit_commits_capacity():
    inv = InventoryForecast([2] * 5, horizon=5)
    assert admit(req("a", 6, 0, 2), inv, 0).accepted
    assert inv.committed[:3] == [2, 2, 2]
    assert not admit(req("b", 1, 0, 2), inv, 0).accepted
    assert admit(req("c", 4, 0, 4), inv, 0).accepted


def test_admit_moves_earlier_commitments_to_make_room():
    inv = InventoryForecast([1] * 4, horizon=4)
    assert admit(req("late", 1, 0, 3), inv, 0).accepted
    assert inv.commitments["late"].plan == {0: 1}
    assert admit(req("urgent", 1, 0, 0), inv, 0).accepted
    assert inv.commitments["urgent"].plan == {0: 1} and inv.commitments["late"].plan != {0: 1}
    assert plans_respect(inv, [1] * 4)


def test_reject_hint_points_at_first_fit():
    inv = InventoryForecast([1] * 8, horizon=8)
    assert admit(req("a", 4, 0, 3, "contiguous"), inv, 0).accepted
    d = admit(req("b", 3, 0, 3, "contiguous"), inv, 0)
    assert not d.accepted and d.hint.earliest_feasible_slot == 4
    assert d.hint.max_packets_feasible_now == 0


def test_admit_window_beyond_horizon():
    inv = InventoryForecast([3] * 10, horizon=4)
    d = admit(req("a", 1, 6, 8), inv, 0)
    assert not d.accepted and d.hint.earliest_feasible_slot == 4


def test_duplicate_id_and_validation():
    inv = InventoryForecast([3] * 4, horizon=4)
    assert admit(req("a", 1, 0, 3), inv, 0).accepted
    with pytest.raises(Exception):
        admit(req("a", 1, 0, 3), inv, 0)
    assert admit(req("x", 1, 3, 2), inv, 0).reason.value == "WindowInverted"


def random_stream(rng: random.Random, horizon: int, flexible_only: bool) -> list[ServiceRequest]:
    out = []
    for k in range(rng.randint(1, 6)):
        kinds = ["arbitrary", "per_slot_cap"] + ([] if flexible_only else ["contiguous"])
        kind = rng.choice(kinds)
        lo = rng.randint(0, horizon - 1)
        hi = rng.randint(lo, horizon - 1)
        packets = rng.randint(1, 4)
        cap = None
        if kind == "contiguous":
            packets = min(packets, hi - lo + 1)
        if kind == "per_slot_cap":
            cap = rng.randint(1, 2)
            packets = min(packets, cap * (hi - lo + 1))
        out.append(req(f"r{k}", packets, lo, hi, kind, cap))
    return out


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 6), st.booleans())
def test_admission_sound_against_brute_force(seed, horizon, flexible_only):
    rng = random.Random(seed)
    capacity = [rng.randint(0, 3) for _ in range(horizon)]
    inv = InventoryForecast(capacity, horizon=horizon)
    accepted: list[ServiceRequest] = []
    for r in random_stream(rng, horizon, flexible_only):
        truth = brute_feasible(capacity, [as_tuple(a) for a in accepted + [r]])
        verdict = admit(r, inv, 0).accepted
        if verdict:
            assert truth, f"unsound accept of {r}"
            accepted.append(r)
        elif flexible_only:
            assert not truth, f"conservative reject of flexible {r}"
        assert plans_respect(inv, capacity)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 6), st.integers(1, 3))
def test_more_capacity_never_turns_accept_into_reject(seed, horizon, extra):
    rng = random.Random(seed)
    capacity = [rng.randint(0, 3) for _ in range(horizon)]
    more = [c + rng.randint(0, extra) for c in capacity]
    low = InventoryForecast(capacity, horizon=horizon)
    high = InventoryForecast(more, horizon=horizon)
    for r in random_stream(rng, horizon, flexible_only=False):
        if admit(r, low, 0).accepted:
            # same committed history on both sides
            assert admit(r, high, 0).accepted, f"{r} rejected with more capacity"


def test_admission_deterministic():
    rng = random.Random(5)
    stream = random_stream(rng, 6, False)
    runs = []
    for _ in range(2):
        inv = InventoryForecast([2, 1, 3, 0, 2, 2], horizon=6)
        runs.append([(admit(r, inv, 0).verdict, sorted(inv.commitments.get(r.request_id, Commitment(r, 1, 0)).plan.items()))
                     for r in stream])
    assert runs[0] == runs[1]


# classification


def test_classify_examples():
    pol = ClassPolicy(2, 6)
    assert classify(req("e", 3, 0, 100, is_emergency=True), 0, pol) == 1
    assert classify(req("t", 3, 0, 2, "contiguous"), 0, pol) == 1
    assert classify(req("r", 1, 0, 101), 0, pol) == 2
    assert classify(req("h", 1, 0, 1, priority_hint=5), 0, pol) == 2
    assert classify(req("r", 1, 0, 101), 0, ClassPolicy(1)) == 1


# availability and slices


@pytest.mark.parametrize("gen,base,locked,cap", [(10, 3, 2, 5), (2, 5, 0, 0), (10, 0, 0, 10)])
def test_compute_availability(gen, base, locked, cap):
    assert compute_availability([gen], [base], [locked]) == [cap]


@pytest.mark.parametrize("capacity,shares", [(5, ("0.6", "0.4")), (5, ("0.5", "0.5")), (0, ("0.5", "0.5")),
                                             (7, ("1/3", "1/3", "1/3")), (9, ("1",))])
def test_plan_slices_matches_flooring_oracle(capacity, shares):
    plan = plan_slices([capacity], shares)
    assert [p[0] for p in plan.per_class] == slices(capacity, shares)


def test_plan_slices_examples():
    assert [p[0] for p in plan_slices([5], ("0.6", "0.4")).per_class] == [3, 2]
    assert [p[0] for p in plan_slices([5], ("0.5", "0.5")).per_class] == [3, 2]


@given(st.lists(st.integers(0, 500), min_size=1, max_size=20),
       st.lists(st.integers(0, 20), min_size=1, max_size=4))
def test_slices_never_exceed_total(capacity, weights):
    if sum(weights) == 0:
        return
    shares = [Fraction(w, sum(weights)) for w in weights]
    plan = plan_slices(capacity, shares)
    for i, cap in enumerate(capacity):
        col = [p[i] for p in plan.per_class]
        assert sum(col) <= cap and min(col) >= 0
        assert sum(col) == cap


def test_shares_must_sum_to_one():
    with pytest.raises(ConfigError, match="shares must sum to 1"):
        check_shares(["0.5", "0.4"])
    with pytest.raises(ConfigError):
        check_shares(["1.5", "-0.5"])


def test_storage_extension_counts_each_packet_once():
    unit = StorageState(soc=5, capacity=10, discharge_rate=2)
    ext = project_extension([unit], [0, 1, 0, 0, 0])
    assert ext == [2, 1, 1, 0, 0]
    assert sum(ext) == 5 - 1
    plan = plan_slices([3, 3, 3, 3, 3], ("0.5", "0.5"), ext)
    assert all(e <= min(unit.discharge_rate, unit.soc) for e in plan.storage_extension)


# allocation


def commitments(*specs):
    out = []
    for rid, deadline, cls in specs:
        c = Commitment(req(rid, 1, 0, deadline), cls, 1)
        c.plan = {0: 1}
        out.append(c)
    return out


def test_allocate_edf_within_class():
    plan = plan_slices([2], ("1",))
    a = allocate(plan, commitments(("B", 5, 1), ("A", 3, 1)), 0)
    assert a.order == ["A", "B"] and a.total == 2
    plan = plan_slices([1], ("1",))
    a = allocate(plan, commitments(("B", 5, 1), ("A", 3, 1)), 0)
    assert a.given == {"A": 1} and a.shortfall == {"B": 1}


def test_allocate_nothing_pending():
    a = allocate(plan_slices([4], ("0.5", "0.5")), [], 0)
    assert a.total == 0 and a.given == {}


def test_allocate_borrowing_is_logged():
    plan = plan_slices([2], ("0.5", "0.5"), [1])
    pend = commitments(("a", 2, 1), ("b", 3, 1), ("c", 4, 1))
    a = allocate(plan, pend, 0)
    c1, c2 = a.classes
    assert a.total == 3
    assert (c1.own, c1.borrowed, c1.storage) == (1, 1, 1)
    assert c2.lent == 1
    for u in a.classes:
        assert u.allocated <= u.slice + u.borrowed_total


def test_allocate_started_block_first():
    blocks = commitments(("x", 9, 2), ("y", 1, 2))
    blocks[0].started = True
    a = allocate(plan_slices([1], ("0.5", "0.5")), blocks, 0)
    assert a.given == {"x": 1}


def test_allocate_emergency_first():
    pend = commitments(("n", 1, 1), ("e", 8, 1))
    pend[1].emergency = True
    a = allocate(plan_slices([1], ("1",)), pend, 0)
    assert a.given == {"e": 1}


# storage planning


def test_plan_storage_examples():
    s = StorageState(soc=0, capacity=10, charge_rate=2, discharge_rate=2)
    assert plan_storage([4], [0], s).actions == [{"buffer": 2}]
    s = StorageState(soc=1, capacity=10, charge_rate=2, discharge_rate=3)
    assert plan_storage([0], [3], s).actions == [{"buffer": -1}]
    s = StorageState(soc=0, capacity=20, charge_rate=10, eta="0.9")
    assert plan_storage([10], [0], s).soc == [{"buffer": 9}]


def test_plan_storage_idle_when_balanced():
    s = StorageState(soc=3, capacity=10)
    p = plan_storage([2, 2], [2, 2], s)
    assert p.actions == [{}, {}] and p.final[0].soc == 3


# emergencies


def emergency_setup():
    storage = [StorageState(soc=3, capacity=3, discharge_rate=1)]
    inv = InventoryForecast([2, 2, 2], storage=storage, shares=("0.5", "0.5"), horizon=3)
    # class 2 sees its slice plus storage: 2 per slot
    assert admit(req("hog#1", 6, 0, 2), inv, 0, cls=2).accepted
    return inv


def test_emergency_admitted_when_ordinary_rejects():
    inv = emergency_setup()
    ordinary = req("v#1", 2, 0, 2, priority_hint=2)
    assert not admit(ordinary, inv, 0, cls=2).accepted
    em = req("v#2", 2, 0, 2, is_emergency=True)
    # physical room: capacity 2 + storage 1 per slot holds the hog and the emergency
    assert brute_feasible([3, 3, 3], [(6, 0, 2, "arbitrary", None), (2, 0, 2, "arbitrary", None)])
    d = handle_emergency(em, inv, EmergencyBudget(1), 0)
    assert d.accepted and d.cls == 1 and d.emergency and not d.demoted


def test_emergency_physically_infeasible():
    inv = InventoryForecast([0, 0, 0], storage=[StorageState(soc=0, capacity=3)], horizon=3)
    d = handle_emergency(req("v#1", 1, 0, 2, is_emergency=True), inv, EmergencyBudget(1), 0)
    assert not d.accepted and d.hint is not None


def test_emergency_budget_demotes_second():
    inv = InventoryForecast([5] * 3, horizon=3)
    budget = EmergencyBudget(1)
    assert handle_emergency(req("v#1", 1, 0, 2, is_emergency=True), inv, budget, 0).emergency
    second = handle_emergency(req("v#2", 1, 0, 2, is_emergency=True), inv, budget, 0)
    assert second.demoted and not second.emergency
    assert budget.count("v", 0) == 1
    assert budget.allows("v", 144)
