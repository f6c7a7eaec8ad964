"""Hybrid offline+online parameter tuning for tiered-memory systems."""

__version__ = "0.1.0"

from .core import (
    DataPoint,
    ParamConfig,
    ParamSpace,
    ParamSpec,
    PerfDatabase,
    ValidationError,
    WorkloadState,
    reward_from_ipc,
    validate_config,
    weighted_distance,
)

__all__ = [
    "DataPoint",
    "ParamConfig",
    "ParamSpace",
    "ParamSpec",
    "PerfDatabase",
    "ValidationError",
    "WorkloadState",
    "reward_from_ipc",
    "validate_config",
    "weighted_distance",
    "__version__",
]
