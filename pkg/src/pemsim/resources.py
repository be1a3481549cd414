"""Physical side: the aggregated generation source and storage units."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import InvalidArgument, SlotIndex, as_fraction


class ProfileShape(str, enum.Enum):
    CONSTANT = "constant"
    SOLAR_DIURNAL = "solar_diurnal"
    TRACE = "trace"


@dataclass(frozen=True)
class GenerationProfile:
    """One component of the virtual power plant.

    ``sigma`` is the spread of the multiplicative forecast error; 0 means the
    forecast is exact. SolarDiurnal repeats every ``slots_per_day`` slots and
    is non-zero only in ``[sunrise_slot, sunset_slot)``.
    """

    shape: ProfileShape = ProfileShape.CONSTANT
    peak_packets: int = 0
    trace: tuple[int, ...] = ()
    sunrise_slot: int = 36
    sunset_slot: int = 108
    slots_per_day: int = 144
    sigma: float = 0.0
    name: str = "source"

    def __post_init__(self) -> None:
        if self.peak_packets < 0:
            raise InvalidArgument("peak_packets must be >= 0")
        if self.sigma < 0:
            raise InvalidArgument("sigma must be >= 0")
        if any(v < 0 for v in self.trace):
            raise InvalidArgument("trace values must be >= 0")
        if self.shape is ProfileShape.SOLAR_DIURNAL and not (
            0 <= self.sunrise_slot < self.sunset_slot <= self.slots_per_day
        ):
            raise InvalidArgument("need 0 <= sunrise < sunset <= slots_per_day")


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def _solar(profile: GenerationProfile, slot: SlotIndex) -> int:
    t = slot % profile.slots_per_day
    if not profile.sunrise_slot <= t < profile.sunset_slot:
        return 0
    daylight = profile.sunset_slot - profile.sunrise_slot
    # centred on the slot midpoint: an odd daylight span peaks exactly at its middle slot
    x = (t - profile.sunrise_slot + 0.5) / daylight
    return round_half_up(profile.peak_packets * math.sin(math.pi * x))


def solar_noon_slot(profile: GenerationProfile) -> SlotIndex:
    return (profile.sunrise_slot + profile.sunset_slot - 1) // 2


def forecast_generation(
    profile: GenerationProfile, window: range, seed: int = 0
) -> list[int]:
    """Forecast packets per slot of ``window``.

    The forecast itself is noise-free, so ``seed`` does not change it; it is
    accepted so all generators share one calling convention.
    """
    if len(window) == 0:
        raise InvalidArgument("empty forecast window")
    if profile.shape is ProfileShape.CONSTANT:
        return [profile.peak_packets] * len(window)
    if profile.shape is ProfileShape.SOLAR_DIURNAL:
        return [_solar(profile, t) for t in window]
    trace = profile.trace
    return [trace[t] if 0 <= t < len(trace) else 0 for t in window]


def realize_generation(
    forecast: Sequence[int], sigma: float | None, seed: int, start_slot: SlotIndex = 0
) -> list[int]:
    """Actual packets given a forecast and multiplicative Gaussian error.

    The noise for slot ``start_slot + i`` depends only on ``(seed, slot)``, so
    realizing a sub-window gives the same values as realizing the whole run.
    """
    if not sigma:
        return list(forecast)
    out = []
    for i, f in enumerate(forecast):
        rng = np.random.default_rng([seed & 0xFFFFFFFF, start_slot + i])
        e = rng.normal(0.0, sigma)
        out.append(max(0, round_half_up(f * (1.0 + e))))
    return out


def aggregate_forecast(profiles: Sequence[GenerationProfile], window: range, seed: int = 0) -> list[int]:
    total = [0] * len(window)
    for p in profiles:
        for i, v in enumerate(forecast_generation(p, window, seed)):
            total[i] += v
    return total


def aggregate_actual(
    profiles: Sequence[GenerationProfile], window: range, seed: int
) -> list[int]:
    total = [0] * len(window)
    for k, p in enumerate(profiles):
        f = forecast_generation(p, window, seed)
        # each component gets its own stream
        actual = realize_generation(f, p.sigma, seed * 1000003 + k, window.start)
        for i, v in enumerate(actual):
            total[i] += v
    return total


def load_trace(path: str | Path) -> tuple[int, ...]:
    """Read a ``slot,packets`` CSV into a dense per-slot tuple (gaps are 0)."""
    values: dict[int, int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"slot", "packets"} <= set(reader.fieldnames):
            raise InvalidArgument(f"{path}: expected header 'slot,packets'")
        for row in reader:
            slot, packets = int(row["slot"]), int(row["packets"])
            if slot < 0 or packets < 0:
                raise InvalidArgument(f"{path}: negative value in row {row}")
            values[slot] = packets
    if not values:
        return ()
    return tuple(values.get(t, 0) for t in range(max(values) + 1))


class StorageTier(str, enum.Enum):
    BUFFER = "buffer"
    CACHE = "cache"


@dataclass(frozen=True)
class StorageState:
    """Storage unit in packets.

    ``remainder`` carries the fractional part of efficiency-scaled charge so
    that repeated small charges are stored exactly once they add up to a
    whole packet.
    """

    unit_id: str = "buffer"
    soc: int = 0
    capacity: int = 0
    charge_rate: int = 1
    discharge_rate: int = 1
    eta: Fraction = Fraction(1)
    tier: StorageTier = StorageTier.BUFFER
    remainder: Fraction = field(default=Fraction(0))
    enabled: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "eta", as_fraction(self.eta))
        if not 0 <= self.soc <= self.capacity:
            raise InvalidArgument(f"{self.unit_id}: need 0 <= soc <= capacity")
        if self.charge_rate < 1 or self.discharge_rate < 1:
            raise InvalidArgument(f"{self.unit_id}: rates must be >= 1")
        if not 0 < self.eta <= 1:
            raise InvalidArgument(f"{self.unit_id}: eta must be in (0, 1]")
        if not 0 <= self.remainder < 1:
            raise InvalidArgument(f"{self.unit_id}: remainder must be in [0, 1)")

    @property
    def headroom(self) -> int:
        return self.capacity - self.soc

    def stored_for(self, charged: int) -> tuple[int, Fraction]:
        """Whole packets stored and new remainder after charging ``charged``."""
        acc = self.remainder + self.eta * charged
        stored = math.floor(acc)
        return stored, acc - stored

    def max_charge(self) -> int:
        """Largest grid-side charge allowed by rate and headroom."""
        if not self.enabled:
            return 0
        # largest a with floor(remainder + eta*a) <= headroom
        limit = math.ceil((self.headroom + 1 - self.remainder) / self.eta) - 1
        return max(0, min(self.charge_rate, limit))

    def max_discharge(self) -> int:
        if not self.enabled:
            return 0
        return min(self.discharge_rate, self.soc)


def apply_storage_action(state: StorageState, action: int) -> StorageState:
    """Apply a signed packet flow (positive = charge) and return the new state."""
    if action > 0:
        if action > state.charge_rate:
            raise InvalidArgument(f"{state.unit_id}: charge {action} > rate {state.charge_rate}")
        stored, rem = state.stored_for(action)
        if stored > state.headroom:
            raise InvalidArgument(f"{state.unit_id}: charge overflows capacity")
        return replace(state, soc=state.soc + stored, remainder=rem)
    if action < 0:
        out = -action
        if out > state.discharge_rate:
            raise InvalidArgument(f"{state.unit_id}: discharge {out} > rate {state.discharge_rate}")
        if out > state.soc:
            raise InvalidArgument(f"{state.unit_id}: discharge {out} > soc {state.soc}")
        return replace(state, soc=state.soc - out)
    return state
