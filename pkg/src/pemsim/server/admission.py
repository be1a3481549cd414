"""Energy inventory, admission control and classification."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from ..core import (
    InvalidArgument,
    PriorityClass,
    RejectionReason,
    ServiceRequest,
    ShapeKind,
    SlotIndex,
    validate_request,
)
from ..protocol import RejectHint
from ..resources import StorageState
from . import packing
from .packing import Item, PackStats
from .slicing import check_shares, compute_availability, plan_slices, project_extension, SlicePlan


class Verdict(str, enum.Enum):
    ACCEPT = "Accept"
    REJECT = "Reject"


@dataclass(frozen=True)
class AdmissionDecision:
    verdict: Verdict
    hint: RejectHint | None = None
    reason: RejectionReason | None = None
    cls: PriorityClass | None = None
    emergency: bool = False
    demoted: bool = False

    @property
    def accepted(self) -> bool:
        return self.verdict is Verdict.ACCEPT


@dataclass(frozen=True)
class ClassPolicy:
    num_classes: int = 2
    slack_threshold: int = 6

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise InvalidArgument("need at least one priority class")


def slack(req: ServiceRequest, now: SlotIndex, packets: int | None = None) -> int:
    packets = req.packets if packets is None else packets
    return (req.deadline_slot - now) - req.shape.min_slots(packets)


def classify(
    req: ServiceRequest, now: SlotIndex, policy: ClassPolicy = ClassPolicy(), packets: int | None = None
) -> PriorityClass:
    """Emergency and tight requests go to class 1, relaxed ones to class 2.

    ``priority_hint`` overrides the slack rule (clamped to the class range);
    ``packets`` lets the caller classify on what is still outstanding.
    """
    if req.is_emergency or policy.num_classes == 1:
        return 1
    if req.priority_hint is not None:
        return max(1, min(policy.num_classes, req.priority_hint))
    return 1 if slack(req, now, packets) <= policy.slack_threshold else 2


@dataclass
class Commitment:
    """An accepted request and where its outstanding packets are planned.

    ``plan`` maps absolute slots to packets; for a request on time its sum is
    ``remaining``. A started contiguous block is ``locked`` and never moved.
    """

    request: ServiceRequest
    cls: PriorityClass
    remaining: int
    plan: dict[SlotIndex, int] = field(default_factory=dict)
    emergency: bool = False
    started: bool = False
    late: bool = False
    accepted_slot: SlotIndex = 0
    # fixed by the request, kept as plain attributes for the hot loops
    key: str = field(init=False, repr=False, compare=False)
    contiguous: bool = field(init=False, repr=False, compare=False)
    per_slot: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        r = self.request
        self.key = r.request_id
        self.contiguous = r.shape.kind is ShapeKind.CONTIGUOUS
        self.per_slot = r.shape.max_per_slot(r.packets)

    def order_key(self) -> tuple:
        r = self.request
        return (not self.emergency, r.deadline_slot, r.submission_slot, r.request_id)


class InventoryForecast:
    """What the server knows about the next slots and what it has promised.

    Arrays are indexed by absolute slot over ``[0, end)``. ``used[k][t]``
    holds packets planned at ``t`` for commitments of class ``k + 1`` or lower
    priority. Started contiguous blocks are also tallied in ``locked``, but
    admission levels are split on gross capacity and the blocks stay booked
    in their class rows, so a block starting never reshapes other slices.
    """

    def __init__(
        self,
        generation: Sequence[int],
        baseload: Sequence[int] | None = None,
        storage: Iterable[StorageState] = (),
        shares: Sequence[float | str | Fraction] = (1,),
        horizon: int = 144,
        now: SlotIndex = 0,
        search_budget: int = 16,
    ) -> None:
        if any(g < 0 for g in generation):
            raise InvalidArgument("forecast generation must be >= 0")
        self.generation = list(generation)
        self.baseload = list(baseload) if baseload is not None else [0] * len(self.generation)
        if len(self.baseload) != len(self.generation) or any(b < 0 for b in self.baseload):
            raise InvalidArgument("baseload must be non-negative and as long as generation")
        if horizon < 1:
            raise InvalidArgument("horizon must be >= 1")
        self._storage = list(storage)
        self._levels: tuple[int, list[list[int]]] | None = None
        self.shares = check_shares(shares)
        self.horizon = horizon
        self.now = now
        self.search_budget = search_budget
        self.end = len(self.generation)
        self.commitments: dict[str, Commitment] = {}
        self.used = [[0] * self.end for _ in self.shares]
        self.locked = [0] * self.end
        # class rows booked by started blocks, a subset of ``used``
        self.fixed = [[0] * self.end for _ in self.shares]
        self.stats = PackStats()
        # items packing gave up on since the plan last changed
        self._failed: list[Item] = []
        # movable commitments by planned absolute slot
        self._at: dict[SlotIndex, dict[str, Commitment]] = {}

    @property
    def num_classes(self) -> int:
        return len(self.shares)

    @property
    def window_end(self) -> SlotIndex:
        return min(self.now + self.horizon, self.end)

    @property
    def committed(self) -> list[int]:
        return list(self.used[0])

    @property
    def storage(self) -> list[StorageState]:
        return self._storage

    @storage.setter
    def storage(self, units: Iterable[StorageState]) -> None:
        self._storage = list(units)
        self._levels = None
        self._failed = []

    def advance(self, now: SlotIndex) -> None:
        if now < self.now:
            raise InvalidArgument(f"cannot move the inventory back from {self.now} to {now}")
        if now != self.now:
            self._levels = None
            self._failed = []
        self.now = now

    # capacity views over [now, window_end)

    def capacity_total(self, locked: bool = True) -> list[int]:
        w = range(self.now, self.window_end)
        gen = [self.generation[t] for t in w]
        base = [self.baseload[t] for t in w]
        return compute_availability(gen, base, [self.locked[t] for t in w] if locked else None)

    def extension(self) -> list[int]:
        w = range(self.now, self.window_end)
        deficit = [max(0, self.baseload[t] - self.generation[t]) for t in w]
        return project_extension(self.storage, deficit)

    def slice_plan(self, locked: bool = True) -> SlicePlan:
        return plan_slices(self.capacity_total(locked), self.shares, self.extension(), self.now)

    def _cached_levels(self) -> list[list[int]]:
        if self._levels is None or self._levels[0] != self.now:
            self._levels = (self.now, self.slice_plan(locked=False).levels())
        return self._levels[1]

    def levels(self) -> list[list[int]]:
        """Class levels left to movable commitments once started blocks are served."""
        now = self.now
        return [[v - f for v, f in zip(lv, fx[now : now + len(lv)])] for lv, fx in zip(self._cached_levels(), self.fixed)]

    def residual(
        self, levels: list[list[int]] | None = None, rows: int | None = None, upto: int | None = None
    ) -> list[list[int]]:
        """Levels minus planned use; ``rows`` and ``upto`` restrict the view to a prefix."""
        levels = levels if levels is not None else self._cached_levels()
        now = self.now
        rows = len(levels) if rows is None else rows
        out = []
        for lv, used in zip(levels[:rows], self.used):
            n = len(lv) if upto is None else min(upto, len(lv))
            u = used[now : now + n]
            out.append([lv[i] - u[i] for i in range(n)])
        return out

    def overcommitted(self) -> bool:
        return any(v < 0 for lv in self.residual() for v in lv)

    # plan bookkeeping

    def _book(self, c: Commitment, slot: SlotIndex, n: int) -> None:
        self._failed = []
        if c.started:
            self.locked[slot] += n
            for k in range(c.cls):
                self.fixed[k][slot] += n
        for k in range(c.cls):
            self.used[k][slot] += n

    def set_plan(self, c: Commitment, plan: dict[SlotIndex, int]) -> None:
        key = c.key
        for t, n in c.plan.items():
            self._book(c, t, -n)
            at = self._at.get(t)
            if at is not None:
                at.pop(key, None)
        c.plan = {t: n for t, n in sorted(plan.items()) if n > 0}
        for t, n in c.plan.items():
            self._book(c, t, n)
            if not c.started:
                self._at.setdefault(t, {})[key] = c

    def set_class(self, c: Commitment, cls: PriorityClass) -> None:
        if cls == c.cls:
            return
        plan = dict(c.plan)
        self.set_plan(c, {})
        c.cls = cls
        self.set_plan(c, plan)

    def lock(self, c: Commitment) -> None:
        plan = dict(c.plan)
        self.set_plan(c, {})
        c.started = True
        self.set_plan(c, plan)

    def add(self, c: Commitment, plan: dict[SlotIndex, int]) -> None:
        self.commitments[c.key] = c
        self.set_plan(c, plan)

    def remove(self, key: str) -> Commitment:
        c = self.commitments.pop(key)
        self.set_plan(c, {})
        return c

    def trim_latest(self, c: Commitment, extra: int) -> None:
        """Drop ``extra`` planned packets from the latest slots (after early delivery)."""
        plan = dict(c.plan)
        for t in sorted(plan, reverse=True):
            if extra <= 0:
                break
            d = min(extra, plan[t])
            plan[t] -= d
            extra -= d
        self.set_plan(c, plan)

    # packing

    def item_for(
        self, req: ServiceRequest, cls: PriorityClass, packets: int | None = None, *, key: str | None = None
    ) -> Item:
        packets = req.packets if packets is None else packets
        return Item(
            key=key or req.request_id,
            packets=packets,
            lo=max(req.earliest_slot, self.now) - self.now,
            hi=min(req.deadline_slot, self.window_end - 1) - self.now,
            cap=req.shape.max_per_slot(req.packets),
            level=cls,
            contiguous=req.shape.kind is ShapeKind.CONTIGUOUS,
            order=(not req.is_emergency, req.deadline_slot, req.submission_slot, req.request_id),
        )

    def movable_items(self) -> list[Item]:
        items = []
        for c in self.commitments.values():
            if c.started or c.remaining <= 0:
                continue
            it = self.item_for(c.request, c.cls, c.remaining, key=c.key)
            it.order = c.order_key()
            if c.late:
                it.soft = True
            if c.contiguous and c.plan:
                it.prefer = min(c.plan) - self.now
            items.append(it)
        return items

    def _to_abs(self, placement: dict[int, int]) -> dict[SlotIndex, int]:
        return {self.now + i: n for i, n in placement.items() if n > 0}

    def _demand_bound_fails(self, new: Item, levels: list[list[int]]) -> bool:
        """Cheap necessary conditions; True means the new item surely cannot fit.

        Checked on every level the new item consumes: everything due by its
        deadline, and everything confined to its window, must fit the supply.
        """
        if packing.max_fit(new, levels) < new.packets:
            return True
        hi = min(new.hi, len(levels[0]) - 1)
        lo = max(new.lo, 0)
        depth = new.level
        demand_to = [new.packets] * depth
        demand_in = [new.packets] * depth
        # same windows item_for would give, without building the items
        last = self.now + hi
        first = self.now + lo
        capped = self.window_end - 1 <= last
        for c in self.commitments.values():
            if c.started or c.late or c.remaining <= 0:
                continue
            r = c.request
            if capped or r.deadline_slot <= last:
                inside = max(r.earliest_slot, self.now) >= first
                for k in range(min(c.cls, depth)):
                    demand_to[k] += c.remaining
                    if inside:
                        demand_in[k] += c.remaining
        for k in range(depth):
            lv = levels[k]
            if demand_to[k] > sum(lv[: hi + 1]) or demand_in[k] > sum(lv[lo : hi + 1]):
                return True
        return False

    def _fit_now(self, new: Item, levels: list[list[int]]) -> dict[SlotIndex, int] | None:
        """Earliest placement into what is free right now, moving nothing."""
        if new.contiguous:
            fit = packing.fit_single(new, self.residual(levels, new.level, new.hi + 1))
            return None if fit is None else self._to_abs(fit)
        if new.packets <= 0:
            return {}
        now = self.now
        rows = list(zip(levels[: new.level], self.used))
        left = new.packets
        place: dict[SlotIndex, int] = {}
        for i in range(max(new.lo, 0), min(new.hi, len(levels[0]) - 1) + 1):
            room = min(lv[i] - used[now + i] for lv, used in rows)
            g = min(left, new.cap, room)
            if g > 0:
                place[now + i] = g
                left -= g
                if not left:
                    return place
        return None

    def try_place(self, new: Item) -> dict[str, dict[SlotIndex, int]] | None:
        """Placements (absolute slots) that make room for ``new``, or None.

        Only the returned keys change; the caller applies them.
        """
        levels = self._cached_levels()
        if new.hi >= 0:
            fit = self._fit_now(new, levels)
            if fit is not None:
                return {new.key: fit}
        if any(_dominates(new, old) for old in self._failed):
            return None
        placed, exact = self._augment(new)
        if placed is not None:
            return placed
        if exact:
            self._failed.append(new)
            return None
        levels = self.levels()
        if self._demand_bound_fails(new, levels):
            return None
        items = self.movable_items()
        placed = packing.pack(items + [new], levels, self.search_budget, self.stats)
        if placed is None:
            self._failed.append(new)
            return None
        return {k: self._to_abs(v) for k, v in placed.items()}

    def _augment(self, new: Item) -> tuple[dict[str, dict[SlotIndex, int]] | None, bool]:
        """Place a flexible item one packet at a time along augmenting paths.

        A path moves single planned packets of other flexible commitments
        from slot to slot, ending where there is free room for the last
        mover's class. Every move stays inside the mover's window and cap.
        Search states are (slot, depth): one unit of room needed at ``slot``
        on class levels ``0..depth-1``; moving a class-k packet out of a slot
        frees levels below k.

        Returns ``(placements, exact)``. With no placement, ``exact`` says
        the failure is final: no contiguous or late commitment sat in the
        explored slots, so no other arrangement can help.
        """
        if new.contiguous or new.packets <= 0:
            return None, False
        levels = self._cached_levels()
        now, n = self.now, len(levels[0])
        lo, hi = max(new.lo, 0), min(new.hi, n - 1)
        if hi < lo:
            return None, True
        resid = self.residual(levels)
        plans: dict[str, dict[SlotIndex, int]] = {}
        moved_in: dict[int, dict[str, Commitment]] = {}
        place: dict[int, int] = {}

        def room(i: int, depth: int) -> int:
            return min(resid[k][i] for k in range(depth))

        def take(i: int, depth: int, g: int) -> None:
            for k in range(depth):
                resid[k][i] -= g

        def planned(cm: Commitment, i: int) -> int:
            return plans.get(cm.key, cm.plan).get(now + i, 0)

        for _ in range(new.packets):
            parent: dict[tuple[int, int], tuple[tuple[int, int] | None, Commitment | None]] = {}
            queue: list[tuple[int, int]] = []
            goal = None
            for i in range(lo, hi + 1):
                if place.get(i, 0) < new.cap:
                    parent[(i, new.level)] = (None, None)
                    if room(i, new.level) > 0:
                        goal = (i, new.level)
                        break
                    queue.append((i, new.level))
            blocked = False
            block: tuple[Commitment, dict[SlotIndex, int]] | None = None
            expanded: set[tuple] = set()
            head = 0
            while goal is None and head < len(queue):
                i, depth = state = queue[head]
                head += 1
                top = max(k for k in range(depth) if resid[k][i] <= 0)
                here = self._at.get(now + i, {})
                extra = moved_in.get(i)
                cands = here.values() if not extra else [*here.values(), *(c for k, c in extra.items() if k not in here)]
                for cm in cands:
                    if cm.key in plans and planned(cm, i) <= 0:
                        continue
                    if cm.contiguous:
                        blocked = True
                        if cm.cls > top and cm.key not in plans and block is None:
                            block = self._slide_block(cm, resid)
                            if block is not None:
                                goal = state
                                break
                        continue
                    if cm.late:
                        # late work is served after everything on time, anywhere ahead
                        blocked = True
                    if cm.cls <= top:
                        continue
                    r = cm.request
                    cap = cm.per_slot
                    capped = cap < r.packets
                    c_hi = n - 1 if cm.late else min(r.deadline_slot - now, n - 1)
                    sig = (cm.key,) if capped else (r.earliest_slot, c_hi, cm.cls)
                    if sig in expanded:
                        continue
                    expanded.add(sig)
                    c_lo = max(r.earliest_slot, now) - now
                    cls = cm.cls
                    for j in range(c_lo, c_hi + 1):
                        nxt = (j, cls)
                        # an uncapped mover has a packet at i, so j always has space for one
                        if nxt in parent or (capped and planned(cm, j) >= cap):
                            continue
                        parent[nxt] = (state, cm)
                        if room(j, cm.cls) > 0:
                            goal = nxt
                            break
                        queue.append(nxt)
                    if goal is not None:
                        break
            if goal is None:
                return None, not blocked and new.packets == 1
            if block is not None:
                cm, moved = block
                for t, v in cm.plan.items():
                    take(t - now, cm.cls, -v)
                for t, v in moved.items():
                    take(t - now, cm.cls, v)
                plans[cm.key] = moved
            state = goal
            while True:
                prev, cm = parent[state]
                j, depth = state
                if cm is None:
                    place[j] = place.get(j, 0) + 1
                    take(j, depth, 1)
                    break
                i = prev[0]
                plan = plans.setdefault(cm.key, dict(cm.plan))
                plan[now + i] -= 1
                plan[now + j] = plan.get(now + j, 0) + 1
                moved_in.setdefault(j, {})[cm.key] = cm
                take(j, cm.cls, 1)
                take(i, cm.cls, -1)
                state = prev
        out = {k: {t: v for t, v in pl.items() if v > 0} for k, pl in plans.items()}
        out[new.key] = self._to_abs(place)
        return out, False

    def _slide_block(
        self, cm: Commitment, resid: list[list[int]]
    ) -> tuple[Commitment, dict[SlotIndex, int]] | None:
        """Another start for an unstarted block, off the slots it holds now."""
        now, n = self.now, len(resid[0])
        held = {t - now for t in cm.plan}
        r = cm.request
        length = cm.remaining
        c_lo = max(r.earliest_slot, now) - now
        c_hi = min(r.deadline_slot - now, n - 1)
        run = 0
        for i in range(c_lo, c_hi + 1):
            ok = i not in held and all(resid[k][i] > 0 for k in range(cm.cls))
            run = run + 1 if ok else 0
            if run >= length:
                start = i - length + 1
                return cm, {now + t: 1 for t in range(start, start + length)}
        return None

    def repack(self) -> list[str]:
        """Re-place every movable commitment; returns keys that can no longer be on time."""
        items = self.movable_items()
        if not items:
            return []
        levels = self.levels()
        placed = packing.pack(items, levels, self.search_budget, self.stats)
        missed: list[str] = []
        if placed is None:
            placed = self._best_effort(items, levels, missed)
        for key, pl in placed.items():
            self.set_plan(self.commitments[key], self._to_abs(pl))
        return missed

    def _best_effort(self, items: list[Item], levels: list[list[int]], missed: list[str]) -> dict:
        work = [list(l) for l in levels]
        out: dict[str, dict[int, int]] = {}
        flex = []
        for it in sorted(items, key=lambda it: it.order):
            if not it.contiguous:
                flex.append(it)
                continue
            starts = packing.contiguous_starts(it, work)
            if not starts:
                # try again past the deadline; the block stays unplanned if even that fails
                late = Item(it.key, it.packets, it.lo, len(work[0]) - 1, 1, it.level, True, it.order)
                starts = packing.contiguous_starts(late, work)
                if not it.soft:
                    missed.append(it.key)
            if starts:
                s = starts[0]
                out[it.key] = {i: 1 for i in range(s, s + it.packets)}
                for i in range(s, s + it.packets):
                    for k in range(it.level):
                        work[k][i] -= 1
            else:
                out[it.key] = {}
        placed = packing.edf_pack(flex, work, self.stats, missed) or {}
        out.update(placed)
        return out

    def hint(self, req: ServiceRequest, cls: PriorityClass) -> RejectHint:
        """Earliest shifted start that fits as things stand, and the most that fits now."""
        resid = self.residual(rows=cls)
        n = len(resid[0])
        room = [min(col) for col in zip(*resid)]
        per = req.shape.max_per_slot(req.packets)
        item = self.item_for(req, cls)
        max_now = min(packing.max_fit(item, resid), req.packets - 1) if item.hi >= item.lo else 0
        length = req.window_length
        first = max(req.earliest_slot, self.now) + 1 - self.now
        if req.shape.kind is ShapeKind.CONTIGUOUS:
            run_from = [0] * (n + 1)
            for i in range(n - 1, -1, -1):
                run_from[i] = run_from[i + 1] + 1 if room[i] >= 1 else 0
            for s in range(max(first, 0), n):
                if run_from[s] >= req.packets and length >= req.packets:
                    return RejectHint(self.now + s, max(0, max_now))
        else:
            prefix = [0]
            for v in room:
                prefix.append(prefix[-1] + max(0, min(per, v)))
            for s in range(max(first, 0), n):
                e = min(n, s + length)
                if prefix[e] - prefix[s] >= req.packets:
                    return RejectHint(self.now + s, max(0, max_now))
        return RejectHint(self.window_end, max(0, max_now))


def _dominates(new: Item, old: Item) -> bool:
    """True when any placement of ``new`` would also place ``old``."""
    return (
        new.packets >= old.packets
        and max(old.lo, 0) <= max(new.lo, 0)
        and new.hi <= old.hi
        and new.cap <= old.cap
        and new.level >= old.level
        and (new.contiguous or not old.contiguous)
        and not new.soft
    )


def admit(
    req: ServiceRequest,
    forecast: InventoryForecast,
    now: SlotIndex,
    cls: PriorityClass = 1,
    *,
    emergency: bool = False,
) -> AdmissionDecision:
    """Accept ``req`` if it can be added without breaking any earlier promise.

    On Accept the request is committed into ``forecast``. Capacity for class
    ``cls`` is its own slice plus lower-priority slices plus storage; class 1
    sees the whole slot.
    """
    if now != forecast.now:
        forecast.advance(now)
    reason = validate_request(req, now)
    if reason is not None:
        return AdmissionDecision(Verdict.REJECT, RejectHint(now + 1, 0), reason, cls, emergency)
    if req.request_id in forecast.commitments:
        raise InvalidArgument(f"{req.request_id} is already committed")
    if req.shape.kind is ShapeKind.PER_SLOT_CAP and req.packets > req.shape.cap * req.window_length:
        return AdmissionDecision(
            Verdict.REJECT, RejectHint(forecast.window_end, 0), RejectionReason.PER_SLOT_CAP_INFEASIBLE, cls, emergency
        )
    if req.earliest_slot >= forecast.window_end:
        return AdmissionDecision(
            Verdict.REJECT, RejectHint(forecast.window_end, 0), RejectionReason.NO_CAPACITY, cls, emergency
        )
    item = forecast.item_for(req, cls)
    placements = forecast.try_place(item)
    if placements is None:
        return AdmissionDecision(
            Verdict.REJECT, forecast.hint(req, cls), RejectionReason.NO_CAPACITY, cls, emergency
        )
    commitment = Commitment(req, cls, req.packets, emergency=emergency, accepted_slot=now)
    forecast.add(commitment, {})
    for key, plan in placements.items():
        forecast.set_plan(forecast.commitments[key], plan)
    return AdmissionDecision(Verdict.ACCEPT, cls=cls, emergency=emergency)


@dataclass
class EmergencyBudget:
    """Emergencies honoured per client per day."""

    per_day: int = 1
    slots_per_day: int = 144
    used: dict[tuple[str, int], int] = field(default_factory=dict)

    def allows(self, client_id: str, now: SlotIndex) -> bool:
        return self.used.get((client_id, now // self.slots_per_day), 0) < self.per_day

    def spend(self, client_id: str, now: SlotIndex) -> None:
        k = (client_id, now // self.slots_per_day)
        self.used[k] = self.used.get(k, 0) + 1

    def count(self, client_id: str, day: int) -> int:
        return self.used.get((client_id, day), 0)


def handle_emergency(
    req: ServiceRequest,
    forecast: InventoryForecast,
    budget: EmergencyBudget,
    now: SlotIndex,
    policy: ClassPolicy = ClassPolicy(),
) -> AdmissionDecision:
    """Admit an emergency as class 1 against all capacity plus storage.

    Over budget, the request is handled as an ordinary one and the decision
    says ``demoted``.
    """
    if not req.is_emergency:
        raise InvalidArgument(f"{req.request_id} is not an emergency")
    if not budget.allows(req.client_id, now):
        ordinary = ServiceRequest(**{**req.__dict__, "is_emergency": False})
        d = admit(ordinary, forecast, now, classify(ordinary, now, policy))
        return AdmissionDecision(d.verdict, d.hint, d.reason, d.cls, False, True)
    budget.spend(req.client_id, now)
    return admit(req, forecast, now, 1, emergency=True)
