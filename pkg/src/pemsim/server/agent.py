"""The energy server: one decision point running the slot pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from ..core import ProtocolViolation, ServiceRequest, SlotIndex
from ..protocol import SERVER_ID, Message, MessageKind
from ..resources import StorageState
from .admission import (
    AdmissionDecision,
    ClassPolicy,
    Commitment,
    EmergencyBudget,
    InventoryForecast,
    admit,
    classify,
    handle_emergency,
)
from .allocation import Allocation, OrderingRule, allocate
from .slicing import plan_slices


@dataclass
class ServerPolicy:
    shares: tuple = (0.6, 0.4)
    ordering: OrderingRule = OrderingRule.EDF
    slack_threshold: int = 6
    horizon: int = 144
    emergency_budget: int = 1
    slots_per_day: int = 144
    pull_forward: bool = True
    search_budget: int = 16


class EnergyServer:
    def __init__(
        self,
        generation_forecast: Sequence[int],
        baseload: Sequence[int],
        storage: Iterable[StorageState] = (),
        policy: ServerPolicy = ServerPolicy(),
        server_id: str = SERVER_ID,
    ) -> None:
        self.policy = policy
        self.server_id = server_id
        self.inventory = InventoryForecast(
            generation_forecast,
            baseload,
            storage,
            policy.shares,
            policy.horizon,
            search_budget=policy.search_budget,
        )
        self.classes = ClassPolicy(self.inventory.num_classes, policy.slack_threshold)
        self.budget = EmergencyBudget(policy.emergency_budget, policy.slots_per_day)
        self.events: list[dict[str, Any]] = []
        self.done: dict[str, Commitment] = {}
        self.acked: dict[str, int] = {}
        self.dirty = False
        self.seq = 0

    def _msg(self, kind: MessageKind, cid: str, to: str, payload: dict, now: SlotIndex) -> Message:
        self.seq += 1
        return Message(kind, cid, self.server_id, to, payload, now, self.seq)

    def log(self, slot: SlotIndex, kind: str, **data: Any) -> None:
        self.events.append({"slot": slot, "event": kind, **data})

    def begin_slot(self, now: SlotIndex) -> None:
        inv = self.inventory
        inv.advance(now)
        for c in list(inv.commitments.values()):
            # tighter slack moves a request up, never down
            new_cls = min(c.cls, classify(c.request, now, self.classes, c.remaining))
            if new_cls < c.cls and not c.started:
                inv.set_class(c, new_cls)
            if not c.late and c.request.deadline_slot < now and c.remaining > 0:
                self._breach(c, now)
        if self.dirty or inv.overcommitted():
            for key in inv.repack():
                c = inv.commitments[key]
                if not c.late:
                    self._breach(c, now)
            self.dirty = False

    def _breach(self, c: Commitment, now: SlotIndex) -> None:
        c.late = True
        self.log(now, "deadline_breach", request_id=c.key, remaining=c.remaining)

    def on_request(self, msg: Message, now: SlotIndex) -> Message:
        req = ServiceRequest.from_dict(msg.payload)
        if msg.kind is MessageKind.EMERGENCY and not req.is_emergency:
            req = ServiceRequest(**{**req.__dict__, "is_emergency": True})
        decision = self.decide(req, now)
        payload: dict[str, Any] = {}
        if decision.cls is not None:
            payload["class"] = decision.cls
        if req.is_emergency:
            payload["emergency"] = "demoted" if decision.demoted else "honoured"
        if decision.accepted:
            return self._msg(MessageKind.ACCEPT, req.request_id, msg.sender, payload, now)
        payload["hint"] = decision.hint.to_dict()
        payload["reason"] = decision.reason.value if decision.reason else None
        self.log(now, "reject", request_id=req.request_id, reason=payload["reason"])
        return self._msg(MessageKind.REJECT, req.request_id, msg.sender, payload, now)

    def decide(self, req: ServiceRequest, now: SlotIndex) -> AdmissionDecision:
        if req.request_id in self.inventory.commitments or req.request_id in self.done:
            raise ProtocolViolation(f"{req.request_id}: request id reused")
        if req.is_emergency:
            d = handle_emergency(req, self.inventory, self.budget, now, self.classes)
            self.log(
                now,
                "emergency_demoted" if d.demoted else "emergency",
                request_id=req.request_id,
                client_id=req.client_id,
                verdict=d.verdict.value,
            )
            return d
        return admit(req, self.inventory, now, classify(req, now, self.classes))

    def reject_late(self, msg: Message, now: SlotIndex) -> Message:
        """Answer a request that arrives after the run is over."""
        hint = {"earliest_feasible_slot": self.inventory.end, "max_packets_feasible_now": 0}
        self.log(now, "reject", request_id=msg.correlation_id, reason="NoCapacity")
        return self._msg(
            MessageKind.REJECT, msg.correlation_id, msg.sender, {"hint": hint, "reason": "NoCapacity"}, now
        )

    def on_ack(self, msg: Message) -> None:
        self.acked[msg.correlation_id] = self.acked.get(msg.correlation_id, 0) + msg.payload["packets"]

    def slot_plan(self, now: SlotIndex):
        """Slices for the current slot on gross capacity, so running blocks sit in their class."""
        inv = self.inventory
        gross = max(0, inv.generation[now] - inv.baseload[now])
        ext = inv.extension()[0] if inv.window_end > now else 0
        return plan_slices([gross], inv.shares, [ext], now)

    def allocate(self, now: SlotIndex) -> Allocation:
        return allocate(
            self.slot_plan(now),
            list(self.inventory.commitments.values()),
            now,
            self.policy.ordering,
            self.policy.pull_forward,
        )

    def record(self, now: SlotIndex, delivered: dict[str, int]) -> list[Commitment]:
        """Book what was physically delivered in ``now``; returns completed commitments."""
        inv = self.inventory
        finished = []
        for c in list(inv.commitments.values()):
            n = delivered.get(c.key, 0)
            planned = c.plan.get(now, 0)
            if not n and not planned:
                continue
            if c.contiguous and n and not c.started:
                inv.lock(c)
            plan = dict(c.plan)
            plan.pop(now, None)
            inv.set_plan(c, plan)
            c.remaining -= n
            if n > planned:
                inv.trim_latest(c, n - planned)
            elif n < planned:
                self.dirty = True
                if c.started and c.remaining > 0:
                    self.log(now, "contiguity_break", request_id=c.key)
                    tail = max(c.plan, default=now) + 1
                    if tail < inv.end:
                        plan = dict(c.plan)
                        plan[tail] = plan.get(tail, 0) + planned - n
                        inv.set_plan(c, plan)
            if c.remaining <= 0:
                self.done[c.key] = inv.remove(c.key)
                finished.append(c)
        return finished

    def update_storage(self, units: Sequence[StorageState]) -> None:
        self.inventory.storage = list(units)

    def delivery_notice(self, c: Commitment | str, client: str, n: int, now: SlotIndex) -> Message:
        key = c if isinstance(c, str) else c.key
        return self._msg(MessageKind.DELIVERY_NOTICE, key, client, {"packets": n, "slot": now}, now)

    def storage_notice(self, unit_id: str, action: int, now: SlotIndex) -> Message:
        return self._msg(MessageKind.STORAGE_NOTICE, f"{unit_id}@{now}", unit_id, {"action": action, "slot": now}, now)

    def commitment(self, key: str) -> Commitment | None:
        return self.inventory.commitments.get(key) or self.done.get(key)
