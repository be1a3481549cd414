"""Packets, slots, requests and schedules shared by every agent.

All energy accounting is done in integer packets. Conversion from Wh happens
once, when a request is created, and always rounds up.
"""

from __future__ import annotations

import enum
import functools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping

SlotIndex = int
PriorityClass = int


class PemError(Exception):
    """Base class for simulator errors."""


class InvalidArgument(PemError, ValueError):
    pass


class ConfigError(PemError, ValueError):
    pass


class ProtocolViolation(PemError):
    pass


@dataclass(frozen=True)
class PacketSpec:
    """Energy quantum: ``size_wh`` delivered over one slot of ``slot_minutes``."""

    size_wh: float = 10.0
    slot_minutes: int = 10

    def __post_init__(self) -> None:
        if not self.size_wh > 0:
            raise InvalidArgument(f"size_wh must be > 0, got {self.size_wh}")
        if not self.slot_minutes > 0:
            raise InvalidArgument(f"slot_minutes must be > 0, got {self.slot_minutes}")

    @property
    def slot_hours(self) -> float:
        return self.slot_minutes / 60.0

    def slot_span(self, slot: SlotIndex) -> tuple[float, float]:
        """Real-time interval [start, end) of ``slot`` in minutes."""
        return slot * self.slot_minutes, (slot + 1) * self.slot_minutes


DEFAULT_SPEC = PacketSpec()


class ShapeKind(str, enum.Enum):
    CONTIGUOUS = "contiguous"
    ARBITRARY = "arbitrary"
    PER_SLOT_CAP = "per_slot_cap"


@dataclass(frozen=True)
class ShapeConstraint:
    kind: ShapeKind
    cap: int | None = None

    def __post_init__(self) -> None:
        if self.kind is ShapeKind.PER_SLOT_CAP:
            if self.cap is None or self.cap < 1:
                raise InvalidArgument(f"PerSlotCap needs cap >= 1, got {self.cap}")
        elif self.cap is not None:
            raise InvalidArgument(f"{self.kind.value} shape takes no cap")

    @classmethod
    def contiguous(cls) -> ShapeConstraint:
        return cls(ShapeKind.CONTIGUOUS)

    @classmethod
    def arbitrary(cls) -> ShapeConstraint:
        return cls(ShapeKind.ARBITRARY)

    @classmethod
    def per_slot_cap(cls, cap: int) -> ShapeConstraint:
        return cls(ShapeKind.PER_SLOT_CAP, cap)

    def max_per_slot(self, packets: int) -> int:
        """Most packets of a ``packets``-sized request one slot may carry."""
        if self.kind is ShapeKind.CONTIGUOUS:
            return 1
        if self.kind is ShapeKind.PER_SLOT_CAP:
            return min(self.cap, packets)
        return packets

    def min_slots(self, packets: int) -> int:
        if packets <= 0:
            return 0
        return math.ceil(packets / self.max_per_slot(packets))

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind.value}
        if self.cap is not None:
            d["cap"] = self.cap
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ShapeConstraint:
        return _shape(d["kind"], d.get("cap"))


@functools.lru_cache(maxsize=1024)
def _shape(kind: str, cap: int | None) -> ShapeConstraint:
    return ShapeConstraint(ShapeKind(kind), cap)


@dataclass(frozen=True)
class ServiceRequest:
    """A client's packetized demand."""

    request_id: str
    client_id: str
    packets: int
    earliest_slot: SlotIndex
    deadline_slot: SlotIndex
    shape: ShapeConstraint
    priority_hint: PriorityClass | None = None
    is_emergency: bool = False
    submission_slot: SlotIndex = 0

    @property
    def window_length(self) -> int:
        return self.deadline_slot - self.earliest_slot + 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "client_id": self.client_id,
            "packets": self.packets,
            "earliest_slot": self.earliest_slot,
            "deadline_slot": self.deadline_slot,
            "shape": self.shape.to_dict(),
            "priority_hint": self.priority_hint,
            "is_emergency": self.is_emergency,
            "submission_slot": self.submission_slot,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ServiceRequest:
        return cls(
            request_id=d["request_id"],
            client_id=d["client_id"],
            packets=d["packets"],
            earliest_slot=d["earliest_slot"],
            deadline_slot=d["deadline_slot"],
            shape=ShapeConstraint.from_dict(d["shape"]),
            priority_hint=d.get("priority_hint"),
            is_emergency=d.get("is_emergency", False),
            submission_slot=d.get("submission_slot", 0),
        )


class RejectionReason(str, enum.Enum):
    ZERO_PACKETS = "ZeroPackets"
    WINDOW_INVERTED = "WindowInverted"
    CONTIGUOUS_WINDOW_TOO_SHORT = "ContiguousWindowTooShort"
    WINDOW_IN_PAST = "WindowInPast"
    PER_SLOT_CAP_INFEASIBLE = "PerSlotCapInfeasible"
    NO_CAPACITY = "NoCapacity"


def packetize_energy(amount_wh: float, spec: PacketSpec = DEFAULT_SPEC) -> int:
    """Number of packets needed to cover ``amount_wh`` (ceiling).

    Values are taken at their decimal repr so that 1.1 Wh in 0.1 Wh packets
    is 11 packets rather than whatever binary rounding suggests.
    """
    if amount_wh < 0:
        raise InvalidArgument(f"energy must be >= 0, got {amount_wh}")
    return math.ceil(as_fraction(amount_wh) / as_fraction(spec.size_wh))


def as_fraction(x: float | int | str | Fraction) -> Fraction:
    if isinstance(x, Fraction):
        return x
    return Fraction(str(x))


def slots_in_horizon(hours: float, spec: PacketSpec = DEFAULT_SPEC) -> int:
    if not hours > 0:
        raise InvalidArgument(f"horizon must be > 0 h, got {hours}")
    minutes = 60 * hours
    if minutes != int(minutes) or int(minutes) % spec.slot_minutes:
        raise InvalidArgument(
            f"{hours} h is not a whole number of {spec.slot_minutes}-min slots"
        )
    return int(minutes) // spec.slot_minutes


def validate_request(req: ServiceRequest, now: SlotIndex) -> RejectionReason | None:
    """Return the first violated request rule, or None if ``req`` is valid at ``now``."""
    if req.packets < 1:
        return RejectionReason.ZERO_PACKETS
    if req.earliest_slot > req.deadline_slot:
        return RejectionReason.WINDOW_INVERTED
    if req.shape.kind is ShapeKind.CONTIGUOUS and req.window_length < req.packets:
        return RejectionReason.CONTIGUOUS_WINDOW_TOO_SHORT
    if req.earliest_slot < now:
        return RejectionReason.WINDOW_IN_PAST
    return None


@dataclass
class Schedule:
    """Committed deliveries and storage flows, keyed by slot.

    ``assignments[t]`` lists ``(request_id, packets)``; ``storage_actions[t]``
    maps a storage unit id to its signed flow (positive = charge).
    """

    start: SlotIndex
    end: SlotIndex
    assignments: dict[SlotIndex, list[tuple[str, int]]] = field(default_factory=dict)
    storage_actions: dict[SlotIndex, dict[str, int]] = field(default_factory=dict)

    def assign(self, slot: SlotIndex, request_id: str, packets: int) -> None:
        if packets <= 0:
            return
        self.assignments.setdefault(slot, []).append((request_id, packets))

    def set_storage(self, slot: SlotIndex, unit_id: str, action: int) -> None:
        if action:
            self.storage_actions.setdefault(slot, {})[unit_id] = action

    def slot_total(self, slot: SlotIndex) -> int:
        return sum(n for _, n in self.assignments.get(slot, ()))

    def delivered(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for entries in self.assignments.values():
            for rid, n in entries:
                out[rid] += n
        return dict(out)

    def slots_of(self, request_id: str) -> list[SlotIndex]:
        return sorted(
            t for t, entries in self.assignments.items() if any(r == request_id for r, _ in entries)
        )

    def per_request(self) -> dict[str, dict[SlotIndex, int]]:
        out: dict[str, dict[SlotIndex, int]] = defaultdict(dict)
        for t in sorted(self.assignments):
            for rid, n in self.assignments[t]:
                out[rid][t] = out[rid].get(t, 0) + n
        return dict(out)


def check_schedule(
    schedule: Schedule,
    requests: Iterable[ServiceRequest],
    availability: Mapping[SlotIndex, int] | None = None,
) -> list[str]:
    """List every invariant violation in ``schedule``; empty when sound.

    Checks window membership, shape rules and, when ``availability`` is
    given, per-slot totals. Does not modify its inputs.
    """
    problems: list[str] = []
    by_id = {r.request_id: r for r in requests}
    per_req = schedule.per_request()
    for rid, slots in per_req.items():
        req = by_id.get(rid)
        if req is None:
            problems.append(f"{rid}: assignment for unknown request")
            continue
        for t, n in slots.items():
            if not req.earliest_slot <= t <= req.deadline_slot:
                problems.append(f"{rid}: slot {t} outside [{req.earliest_slot}, {req.deadline_slot}]")
            if n > req.shape.max_per_slot(req.packets):
                problems.append(f"{rid}: {n} packets in slot {t} exceeds shape limit")
        if req.shape.kind is ShapeKind.CONTIGUOUS:
            ts = sorted(slots)
            if ts and ts[-1] - ts[0] + 1 != len(ts):
                problems.append(f"{rid}: contiguous delivery is broken {ts}")
        if sum(slots.values()) > req.packets:
            problems.append(f"{rid}: over-delivered")
    if availability is not None:
        for t, cap in availability.items():
            total = schedule.slot_total(t)
            if total > cap:
                problems.append(f"slot {t}: {total} assigned > {cap} available")
    return problems
