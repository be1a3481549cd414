"""Per-slot capacity, class slices and the storage extension on top of them."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from ..core import ConfigError, SlotIndex, as_fraction
from ..resources import StorageState


def compute_availability(
    generation: Sequence[int], baseload: Sequence[int], locked: Sequence[int] | None = None
) -> list[int]:
    """Packets left for flexible loads once baseload and running blocks are served."""
    locked = locked if locked is not None else [0] * len(generation)
    return [max(0, g - b - l) for g, b, l in zip(generation, baseload, locked)]


def check_shares(shares: Sequence[float | str | Fraction]) -> tuple[Fraction, ...]:
    """Exact rational shares, rejecting anything negative or not summing to 1."""
    if not shares:
        raise ConfigError("at least one class share is required")
    fr = tuple(as_fraction(s) for s in shares)
    if any(s < 0 for s in fr):
        raise ConfigError(f"shares must be >= 0, got {[str(s) for s in fr]}")
    if sum(fr) != 1:
        raise ConfigError(f"shares must sum to 1, got {sum(fr)}")
    return fr


def project_extension(units: Sequence[StorageState], base_deficit: Sequence[int]) -> list[int]:
    """Discharge the planner may count on per slot, from today's charge only.

    Forecast baseload deficits are reserved first; the rest of the pool is
    handed out front-loaded under each unit's discharge rate. No future
    charging is assumed and each stored packet is counted in one slot only.
    """
    n = len(base_deficit)
    active = [u for u in units if u.enabled]
    pool = [u.soc for u in active]
    rate_left = [[u.discharge_rate] * n for u in active]
    for t, need in enumerate(base_deficit):
        for k in range(len(active)):
            if need <= 0:
                break
            d = min(need, pool[k], rate_left[k][t])
            pool[k] -= d
            rate_left[k][t] -= d
            need -= d
    ext = [0] * n
    for t in range(n):
        for k in range(len(active)):
            d = min(pool[k], rate_left[k][t])
            pool[k] -= d
            ext[t] += d
    return ext


@dataclass(frozen=True)
class SlicePlan:
    """Class slices over consecutive slots starting at ``start``.

    ``per_class[c][i]`` is the slice of class ``c + 1`` in slot ``start + i``.
    """

    start: SlotIndex
    capacity_total: tuple[int, ...]
    per_class: tuple[tuple[int, ...], ...]
    storage_extension: tuple[int, ...]

    @property
    def num_classes(self) -> int:
        return len(self.per_class)

    def __len__(self) -> int:
        return len(self.capacity_total)

    def index(self, slot: SlotIndex) -> int:
        i = slot - self.start
        if not 0 <= i < len(self):
            raise IndexError(f"slot {slot} outside plan [{self.start}, {self.start + len(self)})")
        return i

    def levels(self) -> list[list[int]]:
        """Nested admission capacities: level k bounds classes k+1 and below."""
        n, c = len(self), self.num_classes
        out = []
        for k in range(c):
            out.append(
                [
                    sum(self.per_class[j][i] for j in range(k, c)) + self.storage_extension[i]
                    for i in range(n)
                ]
            )
        # the top level is the whole slot, flooring leftovers included
        out[0] = [self.capacity_total[i] + self.storage_extension[i] for i in range(n)]
        return out


def plan_slices(
    capacity_total: Sequence[int],
    shares: Sequence[float | str | Fraction],
    storage_extension: Sequence[int] | None = None,
    start: SlotIndex = 0,
) -> SlicePlan:
    fr = check_shares(shares)
    ext = tuple(storage_extension) if storage_extension is not None else (0,) * len(capacity_total)
    if len(ext) != len(capacity_total):
        raise ValueError("storage_extension length differs from capacity_total")
    per = [[0] * len(capacity_total) for _ in fr]
    ratios = [(s.numerator, s.denominator) for s in fr]
    for i, cap in enumerate(capacity_total):
        floors = [num * cap // den for num, den in ratios]
        floors[0] += cap - sum(floors)
        for c, v in enumerate(floors):
            per[c][i] = v
    return SlicePlan(
        start=start,
        capacity_total=tuple(capacity_total),
        per_class=tuple(tuple(p) for p in per),
        storage_extension=ext,
    )
