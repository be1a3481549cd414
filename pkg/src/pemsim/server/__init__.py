"""Energy server: admission, classification, slicing, allocation, storage."""

from .admission import (
    AdmissionDecision,
    ClassPolicy,
    Commitment,
    EmergencyBudget,
    InventoryForecast,
    Verdict,
    admit,
    classify,
    handle_emergency,
    slack,
)
from .agent import EnergyServer, ServerPolicy
from .allocation import Allocation, ClassUse, OrderingRule, StoragePlan, allocate, plan_storage, storage_flow
from .slicing import SlicePlan, check_shares, compute_availability, plan_slices, project_extension

__all__ = [
    "AdmissionDecision",
    "Allocation",
    "ClassPolicy",
    "ClassUse",
    "Commitment",
    "EmergencyBudget",
    "EnergyServer",
    "InventoryForecast",
    "OrderingRule",
    "ServerPolicy",
    "SlicePlan",
    "StoragePlan",
    "Verdict",
    "admit",
    "allocate",
    "check_shares",
    "classify",
    "compute_availability",
    "handle_emergency",
    "plan_slices",
    "plan_storage",
    "project_extension",
    "slack",
    "storage_flow",
]
