"""Scenario documents: JSON parsed into validated pydantic models."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Annotated, Any, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .core import ConfigError, PacketSpec
from .protocol import RetryPolicy, RouterMode
from .resources import GenerationProfile, ProfileShape, StorageState, StorageTier, load_trace
from .server.allocation import OrderingRule
from .server.slicing import check_shares

BUNDLED = ("fig5_30slots", "day_144slots_10households", "oversubscribed", "forecast_error")


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PacketModel(_Model):
    size_wh: float = Field(10.0, gt=0)
    slot_minutes: int = Field(10, gt=0)

    def spec(self) -> PacketSpec:
        return PacketSpec(self.size_wh, self.slot_minutes)


class SourceModel(_Model):
    name: str = "source"
    shape: ProfileShape = ProfileShape.CONSTANT
    peak_packets: int = Field(0, ge=0)
    trace: list[Annotated[int, Field(ge=0)]] = []
    trace_file: str | None = None
    sunrise_slot: int = 36
    sunset_slot: int = 108
    slots_per_day: int = 144
    sigma: float = Field(0.0, ge=0)

    def profile(self, base_dir: Path | None = None) -> GenerationProfile:
        trace = tuple(self.trace)
        if self.trace_file:
            path = Path(self.trace_file)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            try:
                trace = load_trace(path)
            except (OSError, ValueError) as e:
                raise ConfigError(f"source {self.name}: {e}") from e
        try:
            return GenerationProfile(
                self.shape,
                self.peak_packets,
                trace,
                self.sunrise_slot,
                self.sunset_slot,
                self.slots_per_day,
                self.sigma,
                self.name,
            )
        except ValueError as e:
            raise ConfigError(f"source {self.name}: {e}") from e


class StorageModel(_Model):
    unit_id: str = "buffer"
    capacity: int = Field(0, ge=0)
    soc: int = Field(0, ge=0)
    charge_rate: int = Field(1, ge=1)
    discharge_rate: int = Field(1, ge=1)
    eta: str | float = "1"
    tier: StorageTier = StorageTier.BUFFER
    enabled: bool | None = None

    def state(self) -> StorageState:
        # caches exist in the model but stay off unless asked for
        enabled = self.enabled if self.enabled is not None else self.tier is StorageTier.BUFFER
        try:
            return StorageState(
                self.unit_id,
                self.soc,
                self.capacity,
                self.charge_rate,
                self.discharge_rate,
                self.eta,
                self.tier,
                enabled=enabled,
            )
        except ValueError as e:
            raise ConfigError(f"storage {self.unit_id}: {e}") from e


class ServerModel(_Model):
    shares: list[str | float] = [0.6, 0.4]
    ordering: OrderingRule = OrderingRule.EDF
    slack_threshold: int = Field(6, ge=0)
    horizon: int = Field(144, ge=1)
    emergency_budget: int = Field(1, ge=0)
    escalation_threshold: int = Field(3, ge=1)
    pull_forward: bool = True
    search_budget: int = Field(16, ge=1)
    acks: bool = True

    @field_validator("shares")
    @classmethod
    def _shares(cls, v: list) -> list:
        try:
            check_shares(v)
        except ConfigError as e:
            raise ValueError(str(e)) from None
        return v


class ChannelModel(_Model):
    delay_slots: int = Field(0, ge=0)
    loss: float = Field(0.0, ge=0, lt=1)


class WeatherModel(_Model):
    outdoor_temp_c: float | list[float] = 5.0

    def at(self, slot: int) -> float:
        t = self.outdoor_temp_c
        if isinstance(t, list):
            return t[min(slot, len(t) - 1)] if t else 5.0
        return t


class WashingMachineLoad(_Model):
    type: Literal["washing_machine"]
    id: str
    packets: int = Field(ge=1)
    earliest_start: int = Field(ge=0)
    ready_by: int = Field(ge=0)
    submit_slot: int | None = None
    retry: RetryPolicy = RetryPolicy.SHIFT


class EvLoad(_Model):
    type: Literal["ev"]
    id: str
    arrival: int = Field(ge=0)
    departure: int = Field(ge=1)
    energy_wh: float = Field(ge=0)
    max_packets_per_slot: int = Field(8, ge=1)
    retry: RetryPolicy = RetryPolicy.SHRINK


class HeaterLoad(_Model):
    type: Literal["heater"]
    id: str
    initial_temp_c: float = 21.0
    t_min_c: float = 19.0
    t_max_c: float = 23.0
    r_thermal: float = Field(0.25, gt=0)
    c_thermal: float = Field(20.0, gt=0)
    heater_w: float = Field(120.0, gt=0)
    lookahead: int = Field(6, ge=1)
    relax_c: float = 3.0
    occupied: list[tuple[int, int]] | None = None
    retry: RetryPolicy = RetryPolicy.DROP


class ExplicitRequestModel(_Model):
    packets: int
    earliest: int
    deadline: int
    shape: Literal["contiguous", "arbitrary", "per_slot_cap"] = "arbitrary"
    cap: int | None = None
    submit_slot: int = 0
    priority_hint: int | None = None
    emergency: bool = False


class ExplicitLoad(_Model):
    type: Literal["explicit"]
    id: str
    requests: list[ExplicitRequestModel]
    retry: RetryPolicy = RetryPolicy.SHIFT


LoadModel = Annotated[
    Union[WashingMachineLoad, EvLoad, HeaterLoad, ExplicitLoad], Field(discriminator="type")
]


class RouterModel(_Model):
    mode: RouterMode = RouterMode.FORWARD_ONLY
    local_buffer_packets: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _local(self) -> RouterModel:
        if self.mode is RouterMode.LOCAL_FIRST and self.local_buffer_packets <= 0:
            raise ValueError("local_first router needs a local buffer")
        return self


class HouseholdModel(_Model):
    id: str
    baseload_packets: int = Field(0, ge=0)
    baseload_trace: list[Annotated[int, Field(ge=0)]] = []
    router: RouterModel = RouterModel()
    loads: list[LoadModel] = []

    @model_validator(mode="after")
    def _unique_loads(self) -> HouseholdModel:
        ids = [l.id for l in self.loads]
        if len(ids) != len(set(ids)):
            raise ValueError(f"household {self.id}: duplicate load ids")
        if any("/" in i or "#" in i or "~" in i for i in ids + [self.id]):
            raise ValueError(f"household {self.id}: ids may not contain '/', '#' or '~'")
        return self

    def baseload_at(self, slot: int) -> int:
        if self.baseload_trace:
            return self.baseload_trace[slot] if slot < len(self.baseload_trace) else 0
        return self.baseload_packets


class FleetModel(_Model):
    """Households generated from the scenario seed."""

    count: int = Field(0, ge=0)
    washing_machine: float = Field(0.6, ge=0, le=1)
    ev: float = Field(0.3, ge=0, le=1)
    heater: float = Field(0.5, ge=0, le=1)
    baseload_packets: int = Field(0, ge=0)
    local_first: float = Field(0.0, ge=0, le=1)
    id_prefix: str = "g"


class ScenarioConfig(_Model):
    name: str = "scenario"
    packet: PacketModel = PacketModel()
    horizon_slots: int = Field(ge=1)
    seed: int = Field(0, ge=0)
    sources: list[SourceModel] = []
    storage: list[StorageModel] = []
    server: ServerModel = ServerModel()
    channel: ChannelModel = ChannelModel()
    weather: WeatherModel = WeatherModel()
    households: list[HouseholdModel] = []
    fleet: FleetModel | None = None

    @model_validator(mode="after")
    def _integrity(self) -> ScenarioConfig:
        ids = [h.id for h in self.households]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate household ids")
        units = [s.unit_id for s in self.storage]
        if len(units) != len(set(units)):
            raise ValueError("duplicate storage unit ids")
        return self

    def with_seed(self, seed: int | None) -> ScenarioConfig:
        return self if seed is None else self.model_copy(update={"seed": seed})

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def _diagnostics(err: ValidationError) -> list[dict[str, Any]]:
    return [
        {"loc": ".".join(str(p) for p in e["loc"]), "msg": e["msg"].removeprefix("Value error, ")}
        for e in err.errors()
    ]


class ConfigValidationError(ConfigError):
    def __init__(self, diagnostics: list[dict[str, Any]]) -> None:
        self.diagnostics = diagnostics
        super().__init__("; ".join(f"{d['loc']}: {d['msg']}" if d["loc"] else d["msg"] for d in diagnostics))


def parse_config(data: Any) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigValidationError(_diagnostics(e)) from None


def resolve_config_path(name_or_path: str) -> Path | None:
    p = Path(name_or_path)
    if p.exists():
        return p
    return None


def load_config(name_or_path: str) -> ScenarioConfig:
    """Load a scenario file, or a bundled scenario by name."""
    path = resolve_config_path(name_or_path)
    if path is not None:
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigValidationError([{"loc": "", "msg": f"cannot read {path}: {e}"}]) from None
    elif name_or_path.removesuffix(".json") in BUNDLED:
        text = resources.files("pemsim.scenarios").joinpath(name_or_path.removesuffix(".json") + ".json").read_text()
    else:
        raise ConfigValidationError([{"loc": "", "msg": f"no such config file or bundled scenario: {name_or_path}"}])
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigValidationError([{"loc": f"line {e.lineno}", "msg": f"invalid JSON: {e.msg}"}]) from None
    return parse_config(data)


def bundled_names() -> tuple[str, ...]:
    return BUNDLED
