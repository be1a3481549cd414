"""Filling one slot's slices with packets, and greedy storage planning."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

from ..core import SlotIndex
from ..resources import StorageState, StorageTier, apply_storage_action
from .admission import Commitment
from .slicing import SlicePlan


class OrderingRule(str, enum.Enum):
    EDF = "edf"
    FCFS = "fcfs"


def order_key(c: Commitment, rule: OrderingRule) -> tuple:
    r = c.request
    if rule is OrderingRule.FCFS:
        return (not c.emergency, r.submission_slot, r.deadline_slot, r.request_id)
    return (not c.emergency, r.deadline_slot, r.submission_slot, r.request_id)


@dataclass
class ClassUse:
    cls: int
    slice: int
    allocated: int = 0
    own: int = 0
    borrowed: int = 0  # from other classes' slices
    storage: int = 0  # from the storage extension
    lent: int = 0

    @property
    def borrowed_total(self) -> int:
        return self.borrowed + self.storage


@dataclass
class Allocation:
    """Packets granted in one slot, with the slice accounting behind them."""

    slot: SlotIndex
    capacity_total: int
    storage_extension: int
    given: dict[str, int] = field(default_factory=dict)
    planned: dict[str, int] = field(default_factory=dict)
    shortfall: dict[str, int] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)
    classes: list[ClassUse] = field(default_factory=list)
    class_of: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.given.values())

    @property
    def storage_used(self) -> int:
        return sum(u.storage for u in self.classes)

    def extra(self, key: str) -> int:
        """Packets given beyond the plan (pulled forward)."""
        return self.given.get(key, 0) - min(self.given.get(key, 0), self.planned.get(key, 0))


def _borrow_order(cls: int, n: int) -> list[int]:
    # lower-priority slices first, then higher-priority leftovers
    return list(range(cls + 1, n + 1)) + list(range(cls - 1, 0, -1))


def allocate(
    plan: SlicePlan,
    pending: Sequence[Commitment],
    now: SlotIndex,
    rule: OrderingRule = OrderingRule.EDF,
    pull_forward: bool = True,
) -> Allocation:
    """Grant packets for slot ``now``.

    Planned packets come first: each class fills its own slice, then borrows
    other classes' unused slices and finally storage. Started contiguous
    blocks are served before anything else in their class. With
    ``pull_forward`` leftover slice capacity (never storage) then serves
    flexible requests ahead of plan.
    """
    i = plan.index(now)
    n_cls = plan.num_classes
    slice_left = {c: plan.per_class[c - 1][i] for c in range(1, n_cls + 1)}
    ext_left = plan.storage_extension[i]
    out = Allocation(now, plan.capacity_total[i], ext_left)
    uses = {c: ClassUse(c, slice_left[c]) for c in range(1, n_cls + 1)}
    members: dict[int, list[Commitment]] = {c: [] for c in uses}
    for c in pending:
        if c.remaining <= 0 or c.request.earliest_slot > now:
            continue
        members[min(max(c.cls, 1), n_cls)].append(c)
    for c in members:
        members[c].sort(key=lambda m: (not m.started, order_key(m, rule)))

    def grant(m: Commitment, cls: int, want: int, storage: bool) -> int:
        nonlocal ext_left
        got = 0
        take = min(want, slice_left[cls])
        slice_left[cls] -= take
        uses[cls].own += take
        got += take
        for donor in _borrow_order(cls, n_cls):
            if got == want:
                break
            take = min(want - got, slice_left[donor])
            slice_left[donor] -= take
            uses[donor].lent += take
            uses[cls].borrowed += take
            got += take
        if storage and got < want:
            take = min(want - got, ext_left)
            ext_left -= take
            uses[cls].storage += take
            got += take
        if got:
            out.given[m.key] = out.given.get(m.key, 0) + got
            out.class_of[m.key] = cls
            uses[cls].allocated += got
            if m.key not in out.order:
                out.order.append(m.key)
        return got

    for cls in range(1, n_cls + 1):
        for m in members[cls]:
            want = min(m.plan.get(now, 0), m.remaining)
            if want <= 0:
                continue
            out.planned[m.key] = want
            got = grant(m, cls, want, storage=True)
            if got < want:
                out.shortfall[m.key] = want - got
    if pull_forward:
        for cls in range(1, n_cls + 1):
            for m in members[cls]:
                if m.contiguous:
                    continue
                have = out.given.get(m.key, 0)
                want = min(m.remaining - have, m.per_slot - have)
                if want > 0:
                    grant(m, cls, want, storage=False)
    out.classes = [uses[c] for c in range(1, n_cls + 1)]
    return out


@dataclass
class StoragePlan:
    actions: list[dict[str, int]]
    soc: list[dict[str, int]]
    final: list[StorageState]


def storage_flow(units: Sequence[StorageState], net: int) -> tuple[dict[str, int], list[StorageState]]:
    """Charge a surplus (``net`` > 0) or cover a deficit (``net`` < 0), buffers before caches."""
    ordered = sorted(range(len(units)), key=lambda k: units[k].tier is not StorageTier.BUFFER)
    new = list(units)
    actions: dict[str, int] = {}
    left = abs(net)
    for k in ordered:
        if left <= 0:
            break
        u = new[k]
        amount = min(left, u.max_charge() if net > 0 else u.max_discharge())
        if amount <= 0:
            continue
        a = amount if net > 0 else -amount
        new[k] = apply_storage_action(u, a)
        actions[u.unit_id] = a
        left -= amount
    return actions, new


def plan_storage(
    capacity_total: Sequence[int],
    allocated: Sequence[int],
    storage: StorageState | Sequence[StorageState],
) -> StoragePlan:
    """Greedy per-slot storage actions: store surpluses, cover deficits."""
    units = [storage] if isinstance(storage, StorageState) else list(storage)
    actions, socs = [], []
    for cap, alloc in zip(capacity_total, allocated):
        act, units = storage_flow(units, cap - alloc)
        actions.append(act)
        socs.append({u.unit_id: u.soc for u in units})
    return StoragePlan(actions, socs, units)
