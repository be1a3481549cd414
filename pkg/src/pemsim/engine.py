"""Slot-stepped simulation of households, routers, the link, the server and storage.

Each slot runs the same phases in the same order:
loads -> routers -> transport -> server -> dispatch -> notices/acks -> record.
"""

from __future__ import annotations

import gc
import random
from contextlib import contextmanager
from dataclasses import dataclass, field
from itertools import islice
from typing import Any, Iterable, Iterator, Sequence

from .config import (
    EvLoad,
    ExplicitLoad,
    HeaterLoad,
    HouseholdModel,
    RouterModel,
    ScenarioConfig,
    WashingMachineLoad,
)
from .core import (
    InvalidArgument,
    PacketSpec,
    PemError,
    Schedule,
    ServiceRequest,
    ShapeConstraint,
    ShapeKind,
    SlotIndex,
    validate_request,
)
from .loads import (
    EvSession,
    RequestRejected,
    ThermalState,
    WashingMachineProgram,
    ev_request,
    heater_packets_per_slot,
    heating_requests,
    next_temperature,
    washing_machine_request,
)
from .protocol import (
    SERVER_ID,
    Channel,
    ClientProtocolState,
    FsmState,
    LocalView,
    Message,
    MessageKind,
    RetryPolicy,
    RouterMode,
    RouterPolicy,
    router_process,
)
from .resources import StorageState, aggregate_actual, aggregate_forecast
from .server.admission import Commitment
from .server.agent import EnergyServer, ServerPolicy
from .server.allocation import Allocation, storage_flow

PENDING = (FsmState.REQUESTED, FsmState.EMERGENCY_PENDING, FsmState.ACCEPTED, FsmState.PARTIALLY_DELIVERED)


class InvariantBreach(PemError):
    """The simulation reached a state its own bookkeeping forbids."""


# ---------------------------------------------------------------- clients


class Client:
    def __init__(self, client_id: str, household: str, retry: RetryPolicy, ctx: "Context") -> None:
        self.client_id = client_id
        self.household = household
        self.proto = ClientProtocolState(
            client_id,
            router_id=f"{household}/router",
            retry=retry,
            escalation_threshold=ctx.escalation_threshold,
            horizon_end=ctx.horizon,
            acks=ctx.acks,
        )
        self.count = 0
        self.received: dict[SlotIndex, int] = {}

    def next_id(self) -> str:
        self.count += 1
        return f"{self.client_id}#{self.count}"

    def generate(self, now: SlotIndex, ctx: "Context") -> list[tuple[ServiceRequest, str | None]]:
        return []

    def receive(self, now: SlotIndex, n: int) -> None:
        self.received[now] = self.received.get(now, 0) + n

    def end_slot(self, now: SlotIndex, ctx: "Context") -> None:
        pass


def _shift_for_delay(req: ServiceRequest, now: SlotIndex, ctx: "Context") -> ServiceRequest | None:
    """Requests cannot start before they reach the server."""
    first = now + ctx.delay
    if req.earliest_slot < first:
        req = ServiceRequest(**{**req.__dict__, "earliest_slot": first})
    if validate_request(req, first) is not None:
        return None
    return req


class WashingMachineClient(Client):
    def __init__(self, cid: str, hh: str, load: WashingMachineLoad, ctx: "Context") -> None:
        super().__init__(cid, hh, load.retry, ctx)
        self.load = load
        self.submit_at = load.submit_slot if load.submit_slot is not None else load.earliest_start

    def generate(self, now, ctx):
        if now != self.submit_at:
            return []
        prog = WashingMachineProgram(self.load.packets, self.load.ready_by, self.load.earliest_start)
        try:
            req = washing_machine_request(prog, ctx.spec, client_id=self.client_id, request_id=self.next_id(), submission_slot=now)
        except RequestRejected as e:
            ctx.log(now, "load_infeasible", client_id=self.client_id, reason=e.reason.value)
            return []
        req = _shift_for_delay(req, now, ctx)
        return [(req, None)] if req else []


class EvClient(Client):
    def __init__(self, cid: str, hh: str, load: EvLoad, ctx: "Context") -> None:
        super().__init__(cid, hh, load.retry, ctx)
        self.load = load

    def generate(self, now, ctx):
        if now != self.load.arrival:
            return []
        session = EvSession(self.load.arrival, self.load.departure, self.load.energy_wh, self.load.max_packets_per_slot)
        try:
            req = ev_request(session, ctx.spec, client_id=self.client_id, request_id=self.next_id())
        except RequestRejected as e:
            ctx.log(now, "load_infeasible", client_id=self.client_id, reason=e.reason.value)
            return []
        if req is None:
            return []
        req = _shift_for_delay(req, now, ctx)
        return [(req, None)] if req else []


def _stays_above(t: float, coldest: float, a: float, steps: int, t_low: float) -> bool:
    """True when an unheated zone cannot drop below ``t_low`` within ``steps`` slots.

    With outdoor temperatures at or above ``coldest`` and ``0 < a <= 1`` the
    zone stays above ``coldest + (t - coldest) * (1 - a) ** k`` after k slots.
    """
    if not 0 < a <= 1:
        return False
    floor = t if t <= coldest else coldest + (t - coldest) * (1 - a) ** steps
    return floor >= t_low + 1e-9


class HeaterClient(Client):
    def __init__(self, cid: str, hh: str, load: HeaterLoad, ctx: "Context") -> None:
        super().__init__(cid, hh, load.retry, ctx)
        self.load = load
        self.state = ThermalState(
            load.initial_temp_c, load.t_min_c, load.t_max_c, load.r_thermal, load.c_thermal, load.heater_w, self.occupied(0, ctx)
        )
        self.rating = heater_packets_per_slot(self.state, ctx.spec)
        self.temp = load.initial_temp_c
        self.temps: list[float] = []
        self._seen = 0
        self._live: list[str] = []

    def occupied(self, slot: SlotIndex, ctx: "Context") -> bool:
        if self.load.occupied is None:
            return True
        t = slot % ctx.slots_per_day
        return any(a <= t < b for a, b in self.load.occupied)

    def outstanding(self) -> list[SlotIndex]:
        p = self.proto
        if len(p.requests) > self._seen:
            self._live.extend(islice(p.requests, self._seen, None))
            self._seen = len(p.requests)
        out = []
        live = []
        for rid in self._live:
            if p.states[rid] in PENDING:
                live.append(rid)
                req = p.requests[rid]
                out.extend([req.deadline_slot] * (req.packets - p.delivered[rid]))
        self._live = live
        return out

    def generate(self, now, ctx):
        pending = self.outstanding()
        room = self.rating - len(pending)
        if room <= 0:
            return []
        first = now + ctx.delay
        load = self.load
        dt_h = ctx.spec.slot_hours
        t = self.temp
        # project from the current temperature through the slots before the server can act
        for i in range(ctx.delay):
            t = next_temperature(t, ctx.outdoor(now + i), 0.0, dt_h, load.r_thermal, load.c_thermal)
        occupied = self.occupied(now, ctx)
        outdoor = [ctx.outdoor(first + i) for i in range(load.lookahead)]
        t_low = load.t_min_c if occupied else load.t_min_c - load.relax_c
        if _stays_above(t, min(outdoor), dt_h / (load.r_thermal * load.c_thermal), load.lookahead, t_low):
            return []
        state = ThermalState(
            t, load.t_min_c, load.t_max_c, load.r_thermal, load.c_thermal, load.heater_w, occupied
        )
        reqs = heating_requests(
            state,
            outdoor,
            load.lookahead,
            ctx.spec,
            first,
            client_id=self.client_id,
            relax_c=load.relax_c,
            pending_deadlines=[d for d in pending if d >= first],
            max_requests=room,
            id_prefix=f"{self.client_id}#{now}",
            submission_slot=now,
        )
        need = f"{self.client_id}/heat"
        return [(r, need) for r in reqs if r.deadline_slot < ctx.horizon]

    def end_slot(self, now, ctx):
        got = self.received.get(now, 0)
        if got > self.rating:
            raise InvalidArgument(f"{got} packets exceed heater rating in one slot")
        load = self.load
        self.temp = next_temperature(
            self.temp, ctx.outdoor(now), got * ctx.spec.size_wh, ctx.spec.slot_hours, load.r_thermal, load.c_thermal
        )
        self.temps.append(self.temp)


class ExplicitClient(Client):
    def __init__(self, cid: str, hh: str, load: ExplicitLoad, ctx: "Context") -> None:
        super().__init__(cid, hh, load.retry, ctx)
        self.load = load

    def generate(self, now, ctx):
        out = []
        for r in self.load.requests:
            if r.submit_slot != now:
                continue
            try:
                shape = ShapeConstraint(ShapeKind(r.shape), r.cap)
            except InvalidArgument as e:
                ctx.log(now, "load_infeasible", client_id=self.client_id, reason=str(e))
                continue
            req = ServiceRequest(
                self.next_id(), self.client_id, r.packets, r.earliest, r.deadline, shape, r.priority_hint, r.emergency, now
            )
            shifted = _shift_for_delay(req, now, ctx) if r.earliest >= now else req
            out.append((shifted or req, None))
        return out


def make_client(hh: str, load, ctx: "Context") -> Client:
    cid = f"{hh}/{load.id}"
    kinds = {
        "washing_machine": WashingMachineClient,
        "ev": EvClient,
        "heater": HeaterClient,
        "explicit": ExplicitClient,
    }
    return kinds[load.type](cid, hh, load, ctx)


# ---------------------------------------------------------------- routers


class Router:
    def __init__(self, household: str, model: RouterModel) -> None:
        self.router_id = f"{household}/router"
        mode = model.mode
        self.policy = RouterPolicy(mode, ("local_buffer",) if mode is RouterMode.LOCAL_FIRST else ())
        self.view = LocalView(model.local_buffer_packets)
        self.schedule: dict[SlotIndex, list[tuple[str, str, int]]] = {}
        self.acked: dict[str, int] = {}
        self.seq = 0

    def msg(self, kind: MessageKind, cid: str, to: str, payload: dict, now: SlotIndex) -> Message:
        self.seq += 1
        return Message(kind, cid, self.router_id, to, payload, now, self.seq)


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class DispatchRecord:
    slot: SlotIndex
    gen_forecast: int
    gen_actual: int
    baseload: int
    baseload_served: int
    class_alloc: tuple[int, ...]
    delivered: int
    charge: int
    discharge: int
    stored: int
    soc: int
    spill: int
    local_delivered: int = 0

    @property
    def unserved_baseload(self) -> int:
        return self.baseload - self.baseload_served

    def balanced(self) -> bool:
        return self.delivered + self.charge == self.gen_actual - self.baseload_served + self.discharge - self.spill

    def row(self) -> dict[str, int]:
        r: dict[str, int] = {
            "slot": self.slot,
            "gen_forecast": self.gen_forecast,
            "gen_actual": self.gen_actual,
            "baseload": self.baseload,
        }
        for c, v in enumerate(self.class_alloc, 1):
            r[f"class{c}_alloc"] = v
        r.update(
            charge=self.charge,
            discharge=self.discharge,
            soc=self.soc,
            spill=self.spill,
            baseload_served=self.baseload_served,
            delivered=self.delivered,
            stored=self.stored,
            local_delivered=self.local_delivered,
        )
        return r

    @classmethod
    def from_row(cls, r: dict[str, Any]) -> DispatchRecord:
        n = sum(1 for k in r if k.startswith("class") and k.endswith("_alloc"))
        v = {k: int(x) for k, x in r.items()}
        return cls(
            v["slot"], v["gen_forecast"], v["gen_actual"], v["baseload"], v["baseload_served"],
            tuple(v[f"class{c}_alloc"] for c in range(1, n + 1)), v["delivered"], v["charge"],
            v["discharge"], v["stored"], v["soc"], v["spill"], v["local_delivered"],
        )


@dataclass(frozen=True)
class SliceRecord:
    slot: SlotIndex
    cls: int
    capacity: int
    slice: int
    allocated: int
    borrowed_slices: int
    borrowed_storage: int
    lent: int
    delivered: int
    storage_extension: int
    charge: int
    discharge: int
    spill: int

    @property
    def borrowed(self) -> int:
        return self.borrowed_slices + self.borrowed_storage

    def row(self) -> dict[str, int]:
        return {
            "slot": self.slot,
            "class": self.cls,
            "allocated": self.allocated,
            "slice": self.slice,
            "borrowed": self.borrowed,
            "borrowed_slices": self.borrowed_slices,
            "borrowed_storage": self.borrowed_storage,
            "lent": self.lent,
            "delivered": self.delivered,
            "capacity": self.capacity,
            "storage_extension": self.storage_extension,
            "charge": self.charge,
            "discharge": self.discharge,
            "spill": self.spill,
        }

    @classmethod
    def from_row(cls, r: dict[str, Any]) -> SliceRecord:
        v = {k: int(x) for k, x in r.items()}
        return cls(
            v["slot"], v["class"], v["capacity"], v["slice"], v["allocated"], v["borrowed_slices"],
            v["borrowed_storage"], v["lent"], v["delivered"], v["storage_extension"], v["charge"],
            v["discharge"], v["spill"],
        )


@dataclass
class KpiSet:
    acceptance_rate: float
    rejection_rate: float
    emergency_count: int
    deadline_miss_count: int
    unserved_packets: int
    spill_packets: int
    storage_cycles: float
    mean_request_latency_slots: float | None
    slice_utilization: dict[str, float | None]
    accepted_requests: int = 0
    rejected_requests: int = 0
    delivered_packets: int = 0
    late_packets: int = 0
    abandoned_packets: int = 0
    local_served_packets: int = 0
    unserved_baseload_packets: int = 0
    emergencies_demoted: int = 0
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class SimResult:
    config: ScenarioConfig
    trace: list[dict[str, Any]]
    schedule: Schedule
    dispatch: list[DispatchRecord]
    slices: list[SliceRecord]
    events: list[dict[str, Any]]
    kpis: KpiSet
    storage_capacity: int
    num_classes: int
    temperatures: dict[str, list[float]] = field(default_factory=dict)
    requests: dict[str, ServiceRequest] = field(default_factory=dict)


# ---------------------------------------------------------------- engine


@dataclass
class Context:
    spec: PacketSpec
    horizon: int
    delay: int
    escalation_threshold: int
    acks: bool
    weather: Any
    slots_per_day: int
    events: list[dict[str, Any]]
    _outdoor: dict[SlotIndex, float] = field(default_factory=dict, repr=False)

    def outdoor(self, slot: SlotIndex) -> float:
        t = self._outdoor.get(slot)
        if t is None:
            t = self._outdoor[slot] = self.weather.at(slot)
        return t

    def log(self, slot: SlotIndex, kind: str, **data: Any) -> None:
        self.events.append({"slot": slot, "event": kind, **data})


def generate_fleet(config: ScenarioConfig) -> list[HouseholdModel]:
    """Households drawn from the fleet recipe; deterministic in the scenario seed."""
    f = config.fleet
    if f is None or f.count == 0:
        return []
    rng = random.Random(config.seed * 7919 + 17)
    T = config.horizon_slots
    out = []
    for k in range(f.count):
        hid = f"{f.id_prefix}{k:04d}"
        loads: list[dict[str, Any]] = []
        if rng.random() < f.washing_machine:
            packets = rng.randint(4, 9)
            start = rng.randint(0, max(0, T - packets - 1))
            ready = min(T - 1, start + packets + rng.randint(6, 60))
            if ready - start + 1 >= packets:
                loads.append({"type": "washing_machine", "id": "wm", "packets": packets,
                              "earliest_start": start, "ready_by": ready})
        if rng.random() < f.ev and T > 12:
            arrival = rng.randint(0, max(0, T - 13))
            departure = min(T, arrival + rng.randint(12, 72))
            slots = departure - arrival
            wh = rng.randint(1, max(1, slots * 2)) * config.packet.size_wh
            loads.append({"type": "ev", "id": "ev", "arrival": arrival, "departure": departure,
                          "energy_wh": wh, "max_packets_per_slot": 4})
        if rng.random() < f.heater:
            loads.append({"type": "heater", "id": "heat", "initial_temp_c": round(rng.uniform(19.5, 22.0), 2),
                          "occupied": [[0, 48], [96, 144]]})
        local = rng.random() < f.local_first
        router = {"mode": "local_first", "local_buffer_packets": rng.randint(2, 12)} if local else {}
        out.append(HouseholdModel.model_validate(
            {"id": hid, "baseload_packets": f.baseload_packets, "router": router, "loads": loads}
        ))
    return out


class MessageQueue:
    """Messages in flight, bucketed by arrival slot."""

    def __init__(self) -> None:
        self._by_slot: dict[SlotIndex, list[Message]] = {}
        self._count = 0

    def append(self, item: tuple[SlotIndex, Message]) -> None:
        arrival, msg = item
        self._by_slot.setdefault(arrival, []).append(msg)
        self._count += 1

    def __len__(self) -> int:
        return self._count

    def due(self, now: SlotIndex | None) -> list[Message]:
        """Everything arrived by ``now`` (or everything at all), in delivery order."""
        slots = sorted(t for t in self._by_slot if now is None or t <= now)
        out: list[tuple] = []
        for t in slots:
            for m in self._by_slot.pop(t):
                out.append((t, m.sent_slot, m.sender, m.seq, m))
        self._count -= len(out)
        out.sort(key=lambda e: e[:4])
        return [e[4] for e in out]


class Simulation:
    def __init__(self, config: ScenarioConfig) -> None:
        self.config = config
        T = config.horizon_slots
        self.T = T
        self.spec = config.packet.spec()
        self.households = list(config.households) + generate_fleet(config)
        if len({h.id for h in self.households}) != len(self.households):
            raise InvariantBreach("generated household ids collide with configured ones")
        self.events: list[dict[str, Any]] = []
        self.ctx = Context(
            self.spec, T, config.channel.delay_slots, config.server.escalation_threshold,
            config.server.acks, config.weather, 144, self.events,
        )
        profiles = [s.profile() for s in config.sources]
        window = range(0, T)
        self.gen_forecast = aggregate_forecast(profiles, window, config.seed) if profiles else [0] * T
        self.gen_actual = aggregate_actual(profiles, window, config.seed) if profiles else [0] * T
        self.baseload = [sum(h.baseload_at(t) for h in self.households) for t in window]
        self.units: list[StorageState] = [s.state() for s in config.storage]
        sp = config.server
        self.server = EnergyServer(
            self.gen_forecast,
            self.baseload,
            self.units,
            ServerPolicy(
                tuple(sp.shares), sp.ordering, sp.slack_threshold, sp.horizon, sp.emergency_budget, 144,
                sp.pull_forward, sp.search_budget,
            ),
        )
        self.channel = Channel(config.channel.delay_slots, config.channel.loss, config.seed)
        self.clients: dict[str, Client] = {}
        self.routers: dict[str, Router] = {}
        for h in self.households:
            self.routers[h.id] = Router(h.id, h.router)
            for load in h.loads:
                c = make_client(h.id, load, self.ctx)
                self.clients[c.client_id] = c
        self.trace: list[tuple[Message, SlotIndex | None]] = []
        self.to_server = MessageQueue()
        self.to_clients = MessageQueue()
        self.schedule = Schedule(0, T)
        self.dispatch: list[DispatchRecord] = []
        self.slices: list[SliceRecord] = []
        self.requests: dict[str, ServiceRequest] = {}

    # messaging

    def _send_link(self, msg: Message, now: SlotIndex, queue: list) -> None:
        arrival = self.channel.deliver(msg, now)
        self.trace.append((msg, arrival))
        if arrival is not None:
            queue.append((arrival, msg))

    def _send_home(self, msg: Message, now: SlotIndex, queue: list) -> None:
        self.trace.append((msg, now))
        queue.append((now, msg))

    def route(self, client: Client, msgs: Sequence[Message], now: SlotIndex) -> None:
        """Household router: serve locally when it can, otherwise forward to the server."""
        router = self.routers[client.household]
        by_id = {m.correlation_id: m for m in msgs}
        for m in msgs:
            self.requests[m.correlation_id] = ServiceRequest.from_dict(m.payload)
        reqs = [self.requests[m.correlation_id] for m in msgs if m.kind is MessageKind.REQUEST]
        forwarded, served = router_process(router.policy, reqs, router.view, now, self.T)
        local = {r.request_id for r, _ in served}
        for r, placement in served:
            m = by_id[r.request_id]
            self._send_home(Message(m.kind, m.correlation_id, m.sender, router.router_id, m.payload, m.sent_slot, m.seq), now, MessageQueue())
            self._send_home(router.msg(MessageKind.ACCEPT, r.request_id, r.client_id, {"local": True}, now), now, self.to_clients)
            for t, n in placement.items():
                router.schedule.setdefault(t, []).append((r.request_id, r.client_id, n))
        for m in msgs:
            if m.correlation_id not in local:
                self._send_link(m, now, self.to_server)

    def _due(self, queue: "MessageQueue", now: SlotIndex | None) -> list[Message]:
        return queue.due(now)

    def _client_phase(self, now: SlotIndex, drain: bool = False) -> None:
        while True:
            batch = self._due(self.to_clients, now)
            if not batch:
                return
            for msg in batch:
                client = self.clients[msg.receiver]
                out = client.proto.on_message(msg, now)
                if out is None:
                    continue
                if out.kind is MessageKind.ACK:
                    if out.receiver == SERVER_ID:
                        self._send_link(out, now, self.to_server)
                    else:
                        router = self.routers[client.household]
                        self.trace.append((out, now))
                        router.acked[out.correlation_id] = router.acked.get(out.correlation_id, 0) + out.payload["packets"]
                else:
                    self.route(client, [out], now)

    def _server_inbox(self, now: SlotIndex, late: bool = False) -> None:
        for msg in self._due(self.to_server, now):
            if msg.kind is MessageKind.ACK:
                self.server.on_ack(msg)
            elif msg.kind in (MessageKind.REQUEST, MessageKind.EMERGENCY):
                reply = self.server.reject_late(msg, now) if late else self.server.on_request(msg, now)
                self._send_link(reply, now, self.to_clients)
            else:
                raise InvariantBreach(f"server got unexpected {msg.kind.value}")

    # physics

    def _realize(self, now: SlotIndex, alloc: Allocation) -> tuple[dict[str, int], int, dict[str, int], int]:
        com = {k: self.server.commitment(k) for k in alloc.given}
        given = dict(alloc.given)
        gen, base = self.gen_actual[now], self.baseload[now]
        need = base + sum(given.values())
        actions: dict[str, int] = {}
        base_served = base
        spill = 0
        if gen >= need:
            actions, self.units = storage_flow(self.units, gen - need)
            spill = gen - need - sum(actions.values())
        else:
            actions, self.units = storage_flow(self.units, gen - need)
            short = need - gen + sum(actions.values())  # actions are negative here

            def rev_key(k: str) -> tuple:
                r = com[k].request
                return (com[k].cls, r.deadline_slot, r.submission_slot, k)

            flex = sorted((k for k in given if not com[k].contiguous), key=rev_key, reverse=True)
            fresh = sorted((k for k in given if com[k].contiguous and not com[k].started), key=rev_key, reverse=True)
            running = sorted((k for k in given if com[k].contiguous and com[k].started), key=rev_key, reverse=True)

            def cut(keys: Iterable[str], limit=None) -> None:
                nonlocal short
                for k in keys:
                    if short <= 0:
                        return
                    room = given[k] if limit is None else min(given[k], limit(k))
                    d = min(short, room)
                    given[k] -= d
                    short -= d

            cut(flex, alloc.extra)
            cut(flex)
            cut(fresh)
            d = min(short, base)
            base_served -= d
            short -= d
            cut(running)
            if short:
                raise InvariantBreach(f"slot {now}: {short} packets short after every cut")
        return {k: v for k, v in given.items() if v}, base_served, actions, spill

    def step(self, now: SlotIndex) -> None:
        ctx = self.ctx
        # 1-2: loads and routers
        for cid in sorted(self.clients):
            client = self.clients[cid]
            msgs = [client.proto.submit(req, now, need) for req, need in client.generate(now, ctx)]
            if msgs:
                self.route(client, msgs, now)
        # 3-4: transport and server pipeline
        self.server.begin_slot(now)
        self._server_inbox(now)
        alloc = self.server.allocate(now)
        # 5: dispatch
        delivered, base_served, actions, spill = self._realize(now, alloc)
        charge = sum(a for a in actions.values() if a > 0)
        discharge = -sum(a for a in actions.values() if a < 0)
        soc_before = sum(u.soc for u in self.server.inventory.storage)
        soc_after = sum(u.soc for u in self.units)
        stored = soc_after - soc_before + discharge
        self.server.update_storage(self.units)
        per_class = [0] * self.server.inventory.num_classes
        for k, n in delivered.items():
            per_class[alloc.class_of[k] - 1] += n
            self.schedule.assign(now, k, n)
        notices = []
        for k, n in sorted(delivered.items()):
            c = self.server.commitment(k)
            self.clients[c.request.client_id].receive(now, n)
            notices.append(self.server.delivery_notice(k, c.request.client_id, n, now))
        self.server.record(now, delivered)
        local = 0
        for hid in sorted(self.routers):
            router = self.routers[hid]
            for rid, cid, n in router.schedule.pop(now, []):
                self.clients[cid].receive(now, n)
                self.schedule.assign(now, rid, n)
                local += n
                self._send_home(router.msg(MessageKind.DELIVERY_NOTICE, rid, cid, {"packets": n, "slot": now}, now), now, self.to_clients)
        rec = DispatchRecord(
            now, self.gen_forecast[now], self.gen_actual[now], self.baseload[now], base_served,
            tuple(per_class), sum(delivered.values()), charge, discharge, stored, soc_after, spill, local,
        )
        if not rec.balanced():
            raise InvariantBreach(f"slot {now}: energy balance broken {rec}")
        self.dispatch.append(rec)
        for u in alloc.classes:
            self.slices.append(
                SliceRecord(
                    now, u.cls, alloc.capacity_total, u.slice, u.allocated, u.borrowed, u.storage, u.lent,
                    per_class[u.cls - 1], alloc.storage_extension, charge, discharge, spill,
                )
            )
        if spill:
            ctx.log(now, "spill", packets=spill)
        # 6: notices and acks
        for unit_id, a in sorted(actions.items()):
            self.trace.append((self.server.storage_notice(unit_id, a, now), now))
        for m in notices:
            self._send_link(m, now, self.to_clients)
        self._client_phase(now)
        # 7: record
        for cid in sorted(self.clients):
            self.clients[cid].end_slot(now, ctx)

    def drain(self) -> None:
        now = self.T
        for _ in range(10 * (self.config.channel.delay_slots + 2) + 100):
            if not self.to_server and not self.to_clients:
                return
            self._server_inbox(now, late=True)
            self._client_phase(now, drain=True)
            now += 1
        raise InvariantBreach("message drain did not terminate")

    def run(self) -> SimResult:
        with _gc_paused():
            return self._run()

    def _run(self) -> SimResult:
        for t in range(self.T):
            self.step(t)
        self.drain()
        self.events.extend(self.server.events)
        self.events.sort(key=lambda e: (e["slot"], e["event"], str(sorted(e.items()))))
        # emission order: deterministic and causal within a slot
        trace = [m.record(a) for m, a in self.trace]
        result = SimResult(
            self.config, trace, self.schedule, self.dispatch, self.slices, self.events,
            kpis=None,  # type: ignore[arg-type]
            storage_capacity=sum(u.capacity for u in self.units if u.enabled),
            num_classes=self.server.inventory.num_classes,
            temperatures={c.client_id: c.temps for c in self.clients.values() if isinstance(c, HeaterClient)},
            requests=self.requests,
        )
        result.kpis = compute_kpis(result)
        return result


@contextmanager
def _gc_paused() -> Iterator[None]:
    """Suspend cyclic GC; a run builds many long-lived acyclic records that full passes keep rescanning."""
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def run(config: ScenarioConfig) -> SimResult:
    return Simulation(config).run()


# ---------------------------------------------------------------- KPIs


def kpis_from_artifacts(
    trace: Sequence[dict[str, Any]],
    dispatch: Sequence[DispatchRecord],
    slices: Sequence[SliceRecord],
    storage_capacity: int,
    num_classes: int,
) -> KpiSet:
    """KPIs from the exported trace and tables alone."""
    reqs: dict[str, dict[str, Any]] = {}
    verdict: dict[str, str] = {}
    delivered: dict[str, int] = {}
    on_time: dict[str, int] = {}
    last: dict[str, int] = {}
    successors: dict[str, dict[str, Any]] = {}
    emergencies = demoted = late = local = 0
    for r in trace:
        kind, cid, p = r["kind"], r["correlation_id"], r["payload"]
        if kind in ("Request", "Emergency") and cid not in reqs:
            reqs[cid] = p
            if p.get("retry_of"):
                successors[p["retry_of"]] = p
            if kind == "Emergency":
                emergencies += 1
    for r in trace:
        kind, cid, p = r["kind"], r["correlation_id"], r["payload"]
        if kind in ("Accept", "Reject"):
            verdict.setdefault(cid, kind)
            if p.get("emergency") == "demoted":
                demoted += 1
        elif kind == "DeliveryNotice":
            n = p["packets"]
            delivered[cid] = delivered.get(cid, 0) + n
            last[cid] = max(last.get(cid, 0), p["slot"])
            if p["slot"] <= reqs[cid]["deadline_slot"]:
                on_time[cid] = on_time.get(cid, 0) + n
            else:
                late += n
            if r["sender"] != SERVER_ID:
                local += n
    accepts = sum(1 for v in verdict.values() if v == "Accept")
    rejects = sum(1 for v in verdict.values() if v == "Reject")
    flags = []
    if accepts + rejects == 0:
        flags.append("no_demand")
        acc_rate = 1.0
    else:
        acc_rate = accepts / (accepts + rejects)
    accepted_ids = [k for k, v in verdict.items() if v == "Accept"]
    accepted_packets = sum(reqs[k]["packets"] for k in accepted_ids)
    total_delivered = sum(delivered.values())
    misses = sum(1 for k in accepted_ids if on_time.get(k, 0) < reqs[k]["packets"])
    abandoned = 0
    for k, v in verdict.items():
        if v != "Reject":
            continue
        nxt = successors.get(k)
        if nxt is None:
            abandoned += reqs[k]["packets"]
        elif nxt["packets"] < reqs[k]["packets"]:
            abandoned += reqs[k]["packets"] - nxt["packets"]
    completed = [k for k in accepted_ids if delivered.get(k, 0) >= reqs[k]["packets"]]
    latency = (
        sum(last[k] - reqs[k]["submission_slot"] for k in completed) / len(completed) if completed else None
    )
    unserved_base = sum(d.unserved_baseload for d in dispatch)
    util: dict[str, float | None] = {}
    for c in range(1, num_classes + 1):
        alloc = sum(s.allocated for s in slices if s.cls == c)
        cap = sum(s.slice for s in slices if s.cls == c)
        util[f"class{c}"] = alloc / cap if cap else None
    discharge = sum(d.discharge for d in dispatch)
    return KpiSet(
        acceptance_rate=acc_rate,
        rejection_rate=1.0 - acc_rate if accepts + rejects else 0.0,
        emergency_count=emergencies,
        deadline_miss_count=misses,
        unserved_packets=max(0, accepted_packets - total_delivered) + unserved_base,
        spill_packets=sum(d.spill for d in dispatch),
        storage_cycles=discharge / storage_capacity if storage_capacity else 0.0,
        mean_request_latency_slots=latency,
        slice_utilization=util,
        accepted_requests=accepts,
        rejected_requests=rejects,
        delivered_packets=total_delivered,
        late_packets=late,
        abandoned_packets=abandoned,
        local_served_packets=local,
        unserved_baseload_packets=unserved_base,
        emergencies_demoted=demoted,
        flags=flags,
    )


def compute_kpis(result: SimResult) -> KpiSet:
    return kpis_from_artifacts(result.trace, result.dispatch, result.slices, result.storage_capacity, result.num_classes)


# ---------------------------------------------------------------- replay


@dataclass(frozen=True)
class ReplayReport:
    ok: bool
    artifact: str | None = None
    slot: SlotIndex | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.ok


def _first_diff(a: Sequence[Any], b: Sequence[Any]) -> int | None:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    if len(a) != len(b):
        return min(len(a), len(b))
    return None


def replay_check(result: SimResult, config: ScenarioConfig) -> ReplayReport:
    """Run ``config`` again and compare every artifact line by line."""
    from .export import artifact_lines

    again = run(config)
    mine, theirs = artifact_lines(result), artifact_lines(again)
    for name in mine:
        i = _first_diff(mine[name], theirs[name])
        if i is None:
            continue
        recs = {"trace": result.trace, "dispatch": result.dispatch, "slices": result.slices}[name]
        other = {"trace": again.trace, "dispatch": again.dispatch, "slices": again.slices}[name]
        rec = recs[i] if i < len(recs) else other[i]
        slot = rec["slot"] if isinstance(rec, dict) else rec.slot
        return ReplayReport(False, name, slot, f"{name} line {i + 1} differs")
    return ReplayReport(True)
