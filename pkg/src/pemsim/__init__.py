"""Packetized energy management: a slot-stepped simulator with an admission-controlled energy server."""

from .config import ScenarioConfig, bundled_names, load_config, parse_config
from .core import (
    ConfigError,
    InvalidArgument,
    PacketSpec,
    PemError,
    ProtocolViolation,
    ServiceRequest,
    ShapeConstraint,
    ShapeKind,
)
from .engine import InvariantBreach, KpiSet, SimResult, compute_kpis, replay_check, run

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "InvalidArgument",
    "InvariantBreach",
    "KpiSet",
    "PacketSpec",
    "PemError",
    "ProtocolViolation",
    "ScenarioConfig",
    "ServiceRequest",
    "ShapeConstraint",
    "ShapeKind",
    "SimResult",
    "__version__",
    "bundled_names",
    "compute_kpis",
    "load_config",
    "parse_config",
    "replay_check",
    "run",
]
