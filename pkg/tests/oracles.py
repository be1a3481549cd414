"""Reference computations written independently of the package internals."""

from __future__ import annotations

import itertools
import math
from decimal import Decimal
from fractions import Fraction
from typing import Iterable, Sequence


def ceil_packets(amount_wh: float, size_wh: float) -> int:
    q = Decimal(str(amount_wh)) / Decimal(str(size_wh))
    return int(q.to_integral_value(rounding="ROUND_CEILING"))


def rc_step(t: float, t_out: float, packets: int, size_wh: float, dt_h: float, r: float, c: float) -> float:
    return t + dt_h / (r * c) * (t_out - t) + packets * size_wh / c


def slices(capacity: int, shares: Sequence[str]) -> list[int]:
    fr = [Fraction(s) for s in shares]
    out = [math.floor(f * capacity) for f in fr]
    out[0] += capacity - sum(out)
    return out


def shape_placements(packets: int, lo: int, hi: int, kind: str, cap: int | None) -> Iterable[tuple[int, ...]]:
    """Every per-slot vector over [lo, hi] a request of this shape may take."""
    n = hi - lo + 1
    if kind == "contiguous":
        for s in range(n - packets + 1):
            yield tuple(1 if s <= i < s + packets else 0 for i in range(n))
        return
    top = packets if kind == "arbitrary" else min(packets, cap)
    for v in itertools.product(range(top + 1), repeat=n):
        if sum(v) == packets:
            yield v


def brute_feasible(capacity: Sequence[int], reqs: Sequence[tuple[int, int, int, str, int | None]]) -> bool:
    """Try every combination of placements; reqs are (packets, lo, hi, kind, cap)."""
    options = [list(shape_placements(*r)) for r in reqs]
    for combo in itertools.product(*options):
        used = [0] * len(capacity)
        for (p, lo, hi, kind, cap), vec in zip(reqs, combo):
            for i, v in enumerate(vec):
                used[lo + i] += v
        if all(u <= c for u, c in zip(used, capacity)):
            return True
    return False


def soc_trajectory(
    initial: dict[str, int], eta: dict[str, Fraction], per_slot: Sequence[Sequence[tuple[str, int]]]
) -> list[int]:
    """Total SoC after each slot's signed actions, storing the floor of the running scaled charge."""
    soc = dict(initial)
    credit = {k: Fraction(0) for k in initial}
    out = []
    for actions in per_slot:
        for unit, a in actions:
            if a > 0:
                credit[unit] += eta[unit] * a
                whole = math.floor(credit[unit])
                credit[unit] -= whole
                soc[unit] += whole
            else:
                soc[unit] += a
        out.append(sum(soc.values()))
    return out
