"""Flexible-load archetypes turned into packetized service requests."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from .core import (
    InvalidArgument,
    PacketSpec,
    RejectionReason,
    ServiceRequest,
    ShapeConstraint,
    SlotIndex,
    packetize_energy,
)


class RequestRejected(InvalidArgument):
    """A load produced a request that can never be valid."""

    def __init__(self, reason: RejectionReason, message: str = "") -> None:
        super().__init__(message or reason.value)
        self.reason = reason


@dataclass(frozen=True)
class WashingMachineProgram:
    packets: int
    ready_by_slot: SlotIndex
    earliest_start: SlotIndex = 0

    def __post_init__(self) -> None:
        if self.packets < 1:
            raise InvalidArgument("program needs at least one packet")


def washing_machine_request(
    prog: WashingMachineProgram,
    spec: PacketSpec | None = None,
    *,
    client_id: str = "wm",
    request_id: str | None = None,
    submission_slot: SlotIndex | None = None,
) -> ServiceRequest:
    """Non-interruptible block: one packet per slot, finished by ``ready_by_slot``."""
    window = prog.ready_by_slot - prog.earliest_start + 1
    if window < prog.packets:
        raise RequestRejected(
            RejectionReason.CONTIGUOUS_WINDOW_TOO_SHORT,
            f"{window}-slot window cannot hold {prog.packets} contiguous packets",
        )
    return ServiceRequest(
        request_id=request_id or f"{client_id}#{prog.earliest_start}",
        client_id=client_id,
        packets=prog.packets,
        earliest_slot=prog.earliest_start,
        deadline_slot=prog.ready_by_slot,
        shape=ShapeConstraint.contiguous(),
        submission_slot=prog.earliest_start if submission_slot is None else submission_slot,
    )


@dataclass(frozen=True)
class ThermalState:
    """First-order RC model of one heated zone.

    ``r_thermal`` is in degC/W, ``c_thermal`` in Wh/degC, so ``r * c`` is a time
    constant in hours.
    """

    indoor_temp_c: float
    t_min_c: float = 19.0
    t_max_c: float = 23.0
    r_thermal: float = 0.25
    c_thermal: float = 20.0
    heater_w: float = 120.0
    occupied: bool = True

    def __post_init__(self) -> None:
        if not self.t_min_c < self.t_max_c:
            raise InvalidArgument("need t_min_c < t_max_c")
        if min(self.r_thermal, self.c_thermal, self.heater_w) <= 0:
            raise InvalidArgument("r_thermal, c_thermal and heater_w must be > 0")

    def band(self, relax_c: float = 3.0) -> tuple[float, float]:
        if self.occupied:
            return self.t_min_c, self.t_max_c
        return self.t_min_c - relax_c, self.t_max_c + relax_c


def heater_packets_per_slot(state: ThermalState, spec: PacketSpec) -> int:
    """Most packets the heater can absorb in one slot."""
    return int(state.heater_w * spec.slot_hours // spec.size_wh)


def thermal_step(
    state: ThermalState, outdoor_temp_c: float, delivered_packets: int, spec: PacketSpec
) -> ThermalState:
    """Advance the zone temperature by one slot."""
    if delivered_packets < 0:
        raise InvalidArgument("delivered_packets must be >= 0")
    dt_h = spec.slot_hours
    heat_wh = delivered_packets * spec.size_wh
    if heat_wh > state.heater_w * dt_h + 1e-9:
        raise InvalidArgument(
            f"{delivered_packets} packets exceed heater rating {state.heater_w} W in one slot"
        )
    t_next = next_temperature(state.indoor_temp_c, outdoor_temp_c, heat_wh, dt_h, state.r_thermal, state.c_thermal)
    return replace(state, indoor_temp_c=t_next)


def next_temperature(t: float, t_out: float, heat_wh: float, dt_h: float, r: float, c: float) -> float:
    return t + dt_h / (r * c) * (t_out - t) + heat_wh / c


_ARBITRARY = ShapeConstraint.arbitrary()


def heating_requests(
    state: ThermalState,
    forecast_outdoor: Sequence[float],
    lookahead: int,
    spec: PacketSpec,
    now: SlotIndex,
    *,
    client_id: str = "heat",
    relax_c: float = 3.0,
    pending_deadlines: Sequence[SlotIndex] = (),
    max_requests: int | None = None,
    id_prefix: str | None = None,
    submission_slot: SlotIndex | None = None,
) -> list[ServiceRequest]:
    """One-packet requests for the slots where the zone would leave its band.

    The projection assumes every outstanding packet (``pending_deadlines``)
    and every packet emitted here lands exactly at its deadline, the latest
    the server may deliver it. ``forecast_outdoor[i]`` is the outdoor
    temperature during slot ``now + i``.
    """
    if lookahead < 1:
        raise InvalidArgument("lookahead must be >= 1")
    t_low, _ = state.band(relax_c)
    pending: dict[SlotIndex, int] = {}
    for d in pending_deadlines:
        pending[d] = pending.get(d, 0) + 1
    cap = heater_packets_per_slot(state, spec)
    budget = max_requests if max_requests is not None else lookahead
    out: list[ServiceRequest] = []
    # next_temperature unrolled, same float operations
    k = spec.slot_hours / (state.r_thermal * state.c_thermal)
    size, c = spec.size_wh, state.c_thermal
    shape = _ARBITRARY
    submitted = now if submission_slot is None else submission_slot
    last = len(forecast_outdoor) - 1
    t = state.indoor_temp_c
    for i in range(lookahead):
        slot = now + i
        t_out = forecast_outdoor[i if i < last else last]
        have = pending.get(slot, 0)
        nxt = t + k * (t_out - t) + min(have, cap) * size / c
        if nxt < t_low and have == 0 and cap >= 1 and len(out) < budget:
            out.append(
                ServiceRequest(
                    request_id=f"{id_prefix or client_id}@{slot}",
                    client_id=client_id,
                    packets=1,
                    earliest_slot=now,
                    deadline_slot=slot,
                    shape=shape,
                    submission_slot=submitted,
                )
            )
            nxt = t + k * (t_out - t) + size / c
        t = nxt
    return out


@dataclass(frozen=True)
class EvSession:
    arrival_slot: SlotIndex
    departure_slot: SlotIndex
    energy_needed_wh: float
    max_packets_per_slot: int = 8

    def __post_init__(self) -> None:
        if not self.arrival_slot < self.departure_slot:
            raise InvalidArgument("arrival_slot must precede departure_slot")
        if self.energy_needed_wh < 0:
            raise InvalidArgument("energy_needed_wh must be >= 0")
        if self.max_packets_per_slot < 1:
            raise InvalidArgument("max_packets_per_slot must be >= 1")


def ev_request(
    session: EvSession,
    spec: PacketSpec | None = None,
    *,
    client_id: str = "ev",
    request_id: str | None = None,
) -> ServiceRequest | None:
    """Charge request over the plug-in window, or None when nothing is needed."""
    spec = spec or PacketSpec()
    packets = packetize_energy(session.energy_needed_wh, spec)
    if packets == 0:
        return None
    window = session.departure_slot - session.arrival_slot
    if packets > session.max_packets_per_slot * window:
        raise RequestRejected(
            RejectionReason.PER_SLOT_CAP_INFEASIBLE,
            f"{packets} packets cannot fit {window} slots at {session.max_packets_per_slot}/slot",
        )
    return ServiceRequest(
        request_id=request_id or f"{client_id}#{session.arrival_slot}",
        client_id=client_id,
        packets=packets,
        earliest_slot=session.arrival_slot,
        deadline_slot=session.departure_slot - 1,
        shape=ShapeConstraint.per_slot_cap(session.max_packets_per_slot),
        submission_slot=session.arrival_slot,
    )
