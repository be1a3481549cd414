"""Exhaustive feasibility oracle for small admission instances.

The search enumerates every shape-respecting placement of every request and
shares no code with the server's packing routines.
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterator, Sequence

from .core import ConfigError, ServiceRequest, ShapeConstraint, ShapeKind
from .server.admission import InventoryForecast, admit

MAX_HORIZON = 8
MAX_REQUESTS = 6
MAX_PACKETS = 4


@dataclass(frozen=True)
class Instance:
    name: str
    capacity: tuple[int, ...]
    requests: tuple[ServiceRequest, ...]

    def check_bounds(self) -> None:
        if len(self.capacity) > MAX_HORIZON:
            raise ConfigError(f"{self.name}: horizon {len(self.capacity)} > {MAX_HORIZON}")
        if len(self.requests) > MAX_REQUESTS:
            raise ConfigError(f"{self.name}: {len(self.requests)} requests > {MAX_REQUESTS}")
        for r in self.requests:
            if r.packets > MAX_PACKETS:
                raise ConfigError(f"{self.name}: {r.request_id} has {r.packets} packets > {MAX_PACKETS}")
            if r.earliest_slot < 0 or r.deadline_slot >= len(self.capacity):
                raise ConfigError(f"{self.name}: {r.request_id} window outside the horizon")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "capacity": list(self.capacity),
            "requests": [r.to_dict() for r in self.requests],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Instance:
        try:
            return cls(
                d["name"],
                tuple(int(v) for v in d["capacity"]),
                tuple(ServiceRequest.from_dict(r) for r in d["requests"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad oracle instance: {e}") from e


def placements(req: ServiceRequest, horizon: int) -> Iterator[tuple[int, ...]]:
    """Every per-slot vector delivering ``req`` exactly, within its window and shape."""
    lo, hi = req.earliest_slot, req.deadline_slot
    if req.shape.kind is ShapeKind.CONTIGUOUS:
        for s in range(lo, hi - req.packets + 2):
            v = [0] * horizon
            for t in range(s, s + req.packets):
                v[t] = 1
            yield tuple(v)
        return
    cap = req.shape.cap if req.shape.kind is ShapeKind.PER_SLOT_CAP else req.packets
    slots = list(range(lo, hi + 1))

    def rec(k: int, left: int, acc: list[int]) -> Iterator[tuple[int, ...]]:
        if k == len(slots):
            if left == 0:
                yield tuple(acc)
            return
        for n in range(min(cap, left) + 1):
            acc[slots[k]] = n
            yield from rec(k + 1, left - n, acc)
        acc[slots[k]] = 0

    yield from rec(0, req.packets, [0] * horizon)


def feasible(capacity: Sequence[int], requests: Sequence[ServiceRequest]) -> bool:
    """True iff all ``requests`` can be placed together within ``capacity``."""
    horizon = len(capacity)
    options = [list(placements(r, horizon)) for r in requests]
    if any(not o for o in options):
        return False
    order = sorted(range(len(requests)), key=lambda j: len(options[j]))

    @lru_cache(maxsize=None)
    def rec(k: int, cap: tuple[int, ...]) -> bool:
        if k == len(order):
            return True
        for v in options[order[k]]:
            if all(a <= c for a, c in zip(v, cap)):
                if rec(k + 1, tuple(c - a for a, c in zip(v, cap))):
                    return True
        return False

    return rec(0, tuple(capacity))


@dataclass
class InstanceResult:
    name: str
    decisions: list[tuple[str, bool, bool]] = field(default_factory=list)  # (id, admit, oracle)

    @property
    def unsound(self) -> int:
        return sum(1 for _, a, o in self.decisions if a and not o)

    @property
    def conservative(self) -> int:
        return sum(1 for _, a, o in self.decisions if o and not a)

    @property
    def any_feasible(self) -> bool:
        return any(o for _, _, o in self.decisions)


@dataclass
class OracleReport:
    results: list[InstanceResult]
    seconds: float
    contiguous_in: dict[str, bool] = field(default_factory=dict)

    @property
    def matrix(self) -> dict[str, int]:
        m = {"accept/feasible": 0, "accept/infeasible": 0, "reject/feasible": 0, "reject/infeasible": 0}
        for r in self.results:
            for _, a, o in r.decisions:
                m[f"{'accept' if a else 'reject'}/{'feasible' if o else 'infeasible'}"] += 1
        return m

    @property
    def unsound(self) -> int:
        return sum(r.unsound for r in self.results)

    @property
    def conservative_instances(self) -> list[str]:
        return [r.name for r in self.results if r.conservative]

    @property
    def feasible_instances(self) -> int:
        return sum(1 for r in self.results if r.any_feasible)

    @property
    def ok(self) -> bool:
        cons = self.conservative_instances
        return (
            self.unsound == 0
            and len(cons) <= 0.1 * max(1, self.feasible_instances)
            and all(self.contiguous_in[n] for n in cons)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "instances": len(self.results),
            "matrix": self.matrix,
            "unsound": self.unsound,
            "feasible_instances": self.feasible_instances,
            "conservative_instances": self.conservative_instances,
            "seconds": round(self.seconds, 3),
            "ok": self.ok,
        }


def check_instance(inst: Instance) -> InstanceResult:
    """Replay the request stream through admit() and ask the oracle about each step."""
    inst.check_bounds()
    inv = InventoryForecast(list(inst.capacity), shares=(1,), horizon=len(inst.capacity))
    accepted: list[ServiceRequest] = []
    res = InstanceResult(inst.name)
    for r in inst.requests:
        oracle_ok = feasible(inst.capacity, accepted + [r])
        verdict = admit(r, inv, 0).accepted
        res.decisions.append((r.request_id, verdict, oracle_ok))
        if verdict:
            accepted.append(r)
    return res


def run_suite(instances: Sequence[Instance]) -> OracleReport:
    t0 = time.perf_counter()
    results = [check_instance(i) for i in instances]
    report = OracleReport(results, time.perf_counter() - t0)
    report.contiguous_in = {
        i.name: any(r.shape.kind is ShapeKind.CONTIGUOUS for r in i.requests) for i in instances
    }
    return report


def generate_suite(count: int = 50, seed: int = 20240605) -> list[Instance]:
    rng = random.Random(seed)
    out = []
    for k in range(count):
        horizon = rng.randint(3, MAX_HORIZON)
        capacity = tuple(rng.randint(0, 3) for _ in range(horizon))
        reqs = []
        for j in range(rng.randint(1, MAX_REQUESTS)):
            packets = rng.randint(1, MAX_PACKETS)
            kind = rng.choice(list(ShapeKind))
            lo = rng.randint(0, horizon - 1)
            hi = rng.randint(lo, horizon - 1)
            if kind is ShapeKind.CONTIGUOUS and hi - lo + 1 < packets:
                hi = min(horizon - 1, lo + packets - 1)
                lo = max(0, hi - packets + 1)
                if hi - lo + 1 < packets:
                    kind = ShapeKind.ARBITRARY
            if kind is ShapeKind.PER_SLOT_CAP:
                shape = ShapeConstraint.per_slot_cap(rng.randint(1, 2))
                if packets > shape.cap * (hi - lo + 1):
                    shape = ShapeConstraint.arbitrary()
            else:
                shape = ShapeConstraint(kind)
            reqs.append(ServiceRequest(f"r{j}", f"c{j}", packets, lo, hi, shape, submission_slot=0))
        out.append(Instance(f"inst{k:02d}", capacity, tuple(reqs)))
    return out


def load_suite(path: str | Path | None = None) -> list[Instance]:
    if path is None:
        text = resources.files("pemsim.scenarios").joinpath("oracle_suite.json").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"oracle suite is not valid JSON: {e}") from e
    items = data["instances"] if isinstance(data, dict) else data
    return [Instance.from_dict(d) for d in items]
