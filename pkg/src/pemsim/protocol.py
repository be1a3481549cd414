"""Five-message packet protocol, client/router behaviour and the simulated link."""

from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .core import (
    InvalidArgument,
    ProtocolViolation,
    ServiceRequest,
    ShapeKind,
    SlotIndex,
    validate_request,
)

SERVER_ID = "server"


class MessageKind(str, enum.Enum):
    REQUEST = "Request"
    ACCEPT = "Accept"
    REJECT = "Reject"
    DELIVERY_NOTICE = "DeliveryNotice"
    STORAGE_NOTICE = "StorageNotice"
    ACK = "Ack"
    EMERGENCY = "Emergency"


REQUEST_KINDS = (MessageKind.REQUEST, MessageKind.EMERGENCY)


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    correlation_id: str
    sender: str
    receiver: str
    payload: Mapping[str, Any]
    sent_slot: SlotIndex
    seq: int = 0

    def order_key(self, arrival: SlotIndex | None = None) -> tuple:
        return (self.sent_slot if arrival is None else arrival, self.sender, self.seq)

    def record(self, arrival: SlotIndex | None) -> dict[str, Any]:
        return {
            "slot": self.sent_slot,
            "seq": self.seq,
            "kind": self.kind.value,
            "sender": self.sender,
            "receiver": self.receiver,
            "correlation_id": self.correlation_id,
            "payload": dict(self.payload),
            "arrival": arrival,
        }


def dumps_record(record: Mapping[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class RejectHint:
    """What a rejected client needs to plan its next attempt."""

    earliest_feasible_slot: SlotIndex
    max_packets_feasible_now: int

    def to_dict(self) -> dict[str, int]:
        return {
            "earliest_feasible_slot": self.earliest_feasible_slot,
            "max_packets_feasible_now": self.max_packets_feasible_now,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RejectHint:
        return cls(d["earliest_feasible_slot"], d["max_packets_feasible_now"])


class FsmState(str, enum.Enum):
    IDLE = "Idle"
    REQUESTED = "Requested"
    ACCEPTED = "Accepted"
    PARTIALLY_DELIVERED = "PartiallyDelivered"
    COMPLETED = "Completed"
    REJECTED = "Rejected"
    EMERGENCY_PENDING = "EmergencyPending"


class RetryPolicy(str, enum.Enum):
    SHIFT = "shift"  # same window length, starting at the hinted slot
    SHRINK = "shrink"  # same window, fewer packets
    DROP = "drop"  # the load generator re-issues on its own


def should_escalate(rejection_count: int, threshold: int) -> bool:
    if threshold < 1:
        raise InvalidArgument("escalation threshold must be >= 1")
    return rejection_count >= threshold


@dataclass
class ClientProtocolState:
    """Per-request protocol state of one client device.

    A logical need groups the original request and all its retries; the
    rejection counter that drives escalation is kept per need.
    """

    client_id: str
    router_id: str | None = None
    retry: RetryPolicy = RetryPolicy.SHIFT
    escalation_threshold: int = 3
    horizon_end: SlotIndex = 144
    acks: bool = True
    states: dict[str, FsmState] = field(default_factory=dict)
    requests: dict[str, ServiceRequest] = field(default_factory=dict)
    delivered: dict[str, int] = field(default_factory=dict)
    need_of: dict[str, str] = field(default_factory=dict)
    rejections: dict[str, int] = field(default_factory=dict)
    abandoned: list[tuple[str, int]] = field(default_factory=list)
    seq: int = 0
    retry_count: int = 0

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def submit(
        self, req: ServiceRequest, now: SlotIndex, need: str | None = None, retry_of: str | None = None
    ) -> Message:
        """Register a fresh request and build the message that carries it.

        Once the need has been rejected ``escalation_threshold`` times the
        request goes out as an Emergency.
        """
        need = need or req.request_id
        if req.request_id in self.states:
            raise ProtocolViolation(f"{req.request_id}: duplicate request id")
        escalate = should_escalate(self.rejections.get(need, 0), self.escalation_threshold)
        if escalate and not req.is_emergency:
            req = _with(req, is_emergency=True)
        self.requests[req.request_id] = req
        self.need_of[req.request_id] = need
        self.delivered[req.request_id] = 0
        self.states[req.request_id] = (
            FsmState.EMERGENCY_PENDING if req.is_emergency else FsmState.REQUESTED
        )
        kind = MessageKind.EMERGENCY if req.is_emergency else MessageKind.REQUEST
        payload = req.to_dict()
        payload["need"] = need
        if retry_of is not None:
            payload["retry_of"] = retry_of
        return Message(kind, req.request_id, self.client_id, SERVER_ID, payload, now, self.next_seq())

    def _retry(self, req: ServiceRequest, hint: RejectHint, now: SlotIndex) -> ServiceRequest | None:
        """Next attempt for a rejected request, or None when the need is given up."""
        if self.retry is RetryPolicy.DROP:
            return None
        earliest = max(req.earliest_slot, now + 1)
        deadline = req.deadline_slot
        packets = req.packets
        if self.retry is RetryPolicy.SHIFT and hint.earliest_feasible_slot < self.horizon_end:
            earliest = max(hint.earliest_feasible_slot, now + 1)
            deadline = earliest + req.window_length - 1
        elif self.retry is RetryPolicy.SHRINK and 0 < hint.max_packets_feasible_now < packets:
            packets = hint.max_packets_feasible_now
        self.retry_count += 1
        new = _with(
            req,
            request_id=f"{self.client_id}~r{self.retry_count}",
            packets=packets,
            earliest_slot=earliest,
            deadline_slot=deadline,
            submission_slot=now,
            is_emergency=False,
        )
        if earliest >= self.horizon_end or validate_request(new, now + 1) is not None:
            return None
        if new.shape.kind is ShapeKind.PER_SLOT_CAP and new.packets > new.shape.cap * new.window_length:
            return None
        return new

    def on_message(self, msg: Message, now: SlotIndex) -> Message | None:
        if msg.receiver != self.client_id:
            raise ProtocolViolation(f"{msg.receiver} is not {self.client_id}")
        rid = msg.correlation_id
        state = self.states.get(rid)
        if state is None:
            raise ProtocolViolation(f"{self.client_id}: unknown correlation id {rid}")
        kind = msg.kind
        pending = (FsmState.REQUESTED, FsmState.EMERGENCY_PENDING)
        if kind is MessageKind.ACCEPT and state in pending:
            self.states[rid] = FsmState.ACCEPTED
            # escalation counts consecutive rejections of a need
            self.rejections[self.need_of[rid]] = 0
            return None
        if kind is MessageKind.REJECT and state in pending:
            self.states[rid] = FsmState.REJECTED
            need = self.need_of[rid]
            self.rejections[need] = self.rejections.get(need, 0) + 1
            req = self.requests[rid]
            hint = RejectHint.from_dict(msg.payload["hint"])
            new = self._retry(req, hint, now)
            if new is None:
                if self.retry is not RetryPolicy.DROP:
                    self.abandoned.append((need, req.packets))
                return None
            if new.packets < req.packets:
                self.abandoned.append((need, req.packets - new.packets))
            return self.submit(new, now, need, retry_of=rid)
        if kind is MessageKind.DELIVERY_NOTICE and state in pending:
            # the Accept was lost on the link; the delivery itself proves it
            state = FsmState.ACCEPTED
        if kind is MessageKind.DELIVERY_NOTICE and state in (
            FsmState.ACCEPTED,
            FsmState.PARTIALLY_DELIVERED,
        ):
            n = msg.payload["packets"]
            got = self.delivered[rid] + n
            if got > self.requests[rid].packets:
                raise ProtocolViolation(f"{rid}: delivered {got} > requested")
            self.delivered[rid] = got
            done = got == self.requests[rid].packets
            self.states[rid] = FsmState.COMPLETED if done else FsmState.PARTIALLY_DELIVERED
            if not self.acks:
                return None
            return Message(
                MessageKind.ACK,
                rid,
                self.client_id,
                msg.sender,
                {"packets": n, "slot": msg.payload.get("slot", msg.sent_slot)},
                now,
                self.next_seq(),
            )
        raise ProtocolViolation(f"{self.client_id}: {kind.value} illegal in state {state.value} for {rid}")


def client_on_message(
    state: ClientProtocolState, msg: Message, now: SlotIndex
) -> tuple[ClientProtocolState, Message | None]:
    """Feed one message to a client; ``state`` is updated in place and returned."""
    out = state.on_message(msg, now)
    return state, out


def _with(req: ServiceRequest, **changes: Any) -> ServiceRequest:
    d = {f: getattr(req, f) for f in req.__dataclass_fields__}
    d.update(changes)
    return ServiceRequest(**d)


class RouterMode(str, enum.Enum):
    FORWARD_ONLY = "forward_only"
    LOCAL_FIRST = "local_first"


@dataclass(frozen=True)
class RouterPolicy:
    mode: RouterMode = RouterMode.FORWARD_ONLY
    local_resources: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.mode is RouterMode.LOCAL_FIRST and not self.local_resources:
            raise InvalidArgument("LocalFirst router needs at least one local resource")


@dataclass
class LocalView:
    """Packets the household can cover on its own."""

    surplus_packets: int = 0


def local_placement(req: ServiceRequest, now: SlotIndex) -> dict[SlotIndex, int] | None:
    """Earliest shape-respecting placement of ``req`` from ``now``, or None if it overruns."""
    start = max(now, req.earliest_slot)
    per_slot = req.shape.max_per_slot(req.packets)
    placement: dict[SlotIndex, int] = {}
    left, t = req.packets, start
    while left:
        n = min(per_slot, left)
        placement[t] = n
        left -= n
        t += 1
    if t - 1 > req.deadline_slot:
        return None
    return placement


def router_process(
    policy: RouterPolicy,
    batch: Sequence[ServiceRequest],
    local_state: LocalView,
    now: SlotIndex = 0,
    horizon_end: SlotIndex | None = None,
) -> tuple[list[ServiceRequest], list[tuple[ServiceRequest, dict[SlotIndex, int]]]]:
    """Split a household batch into forwarded requests and locally served ones.

    LocalFirst serves whole requests from the local surplus in deadline
    order; anything that does not fit is forwarded unchanged. ``local_state``
    is debited for what is served.
    """
    if policy.mode is RouterMode.FORWARD_ONLY or local_state.surplus_packets <= 0:
        return list(batch), []
    forwarded: list[ServiceRequest] = []
    served: list[tuple[ServiceRequest, dict[SlotIndex, int]]] = []
    order = sorted(batch, key=lambda r: (r.deadline_slot, r.submission_slot, r.request_id))
    chosen: set[str] = set()
    for req in order:
        if req.is_emergency or req.packets > local_state.surplus_packets:
            continue
        placement = local_placement(req, now)
        if placement is None or (horizon_end is not None and max(placement) >= horizon_end):
            continue
        local_state.surplus_packets -= req.packets
        served.append((req, placement))
        chosen.add(req.request_id)
    forwarded = [r for r in batch if r.request_id not in chosen]
    return forwarded, served


@dataclass
class Channel:
    """Simulated link with fixed delay and independent seeded loss."""

    delay_slots: int = 0
    loss: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.delay_slots < 0:
            raise InvalidArgument("delay_slots must be >= 0")
        if not 0.0 <= self.loss < 1.0:
            raise InvalidArgument(f"loss probability must be in [0, 1), got {self.loss}")
        self._rng = random.Random(self.seed)

    @property
    def lossless(self) -> bool:
        return self.loss == 0.0

    def deliver(self, msg: Message, now: SlotIndex) -> SlotIndex | None:
        if self.loss and self._rng.random() < self.loss:
            return None
        return now + self.delay_slots


def transport_deliver(channel: Channel, msg: Message, now: SlotIndex) -> SlotIndex | None:
    """Arrival slot of ``msg`` sent at ``now``, or None if the link drops it."""
    return channel.deliver(msg, now)


def canonical(messages: Iterable[Message]) -> list[Message]:
    return sorted(messages, key=lambda m: (m.sent_slot, m.sender, m.seq))
