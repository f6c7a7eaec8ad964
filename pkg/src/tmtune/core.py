"""Shared domain types and the distance / reward arithmetic used everywhere else.

All types here are immutable value objects: safe to share across threads,
hashable where it matters, validated at construction time.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# Slack allowed on slow_read_ratio + slow_write_ratio (both are fractions of
# the same traffic total, but simulated ratios carry per-interval jitter).
SLOW_SUM_EPSILON = 0.05

WS_FIELDS = ("l2_hit", "l3_hit", "slow_read_ratio", "slow_write_ratio", "total_read_ratio")
WS_DIM = len(WS_FIELDS)

WEIGHT_SUM_TOL = 1e-9


class ValidationError(ValueError):
    """A domain invariant was violated at construction or call time."""


@dataclass(frozen=True)
class WorkloadState:
    """Five normalized performance metrics describing workload + tiering state.

    The first two ratios characterize the workload (cache behavior); the
    slow-traffic ratios capture how well page migration has concentrated
    traffic on the fast tier; total_read_ratio separates read- from
    write-dominated intervals. All are dimensionless ratios in [0, 1].
    """

    l2_hit: float
    l3_hit: float
    slow_read_ratio: float
    slow_write_ratio: float
    total_read_ratio: float

    def __post_init__(self):
        for name in WS_FIELDS:
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(f"{name} must be finite, got {v!r}")
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v!r}")
        if self.slow_read_ratio + self.slow_write_ratio > 1.0 + SLOW_SUM_EPSILON:
            raise ValidationError(
                "slow_read_ratio + slow_write_ratio exceeds total traffic: "
                f"{self.slow_read_ratio} + {self.slow_write_ratio}"
            )

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.l2_hit, self.l3_hit, self.slow_read_ratio,
             self.slow_write_ratio, self.total_read_ratio],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "WorkloadState":
        vals = [float(x) for x in arr]
        if len(vals) != WS_DIM:
            raise ValidationError(f"expected {WS_DIM} metrics, got {len(vals)}")
        return cls(*vals)


@dataclass(frozen=True)
class ParamSpec:
    """One tunable knob: its legal integer values and where it is applied.

    candidates must be strictly increasing and contain the default.
    apply_path is the sysfs/procfs file the sysfs backends write to; None for
    knobs applied through other channels (simulator, user-space daemons).
    """

    name: str
    candidates: tuple[int, ...]
    default: int
    apply_path: str | None = None

    def __post_init__(self):
        if not self.candidates:
            raise ValidationError(f"{self.name}: candidate list is empty")
        cands = tuple(int(c) for c in self.candidates)
        object.__setattr__(self, "candidates", cands)
        if any(b <= a for a, b in zip(cands, cands[1:])):
            raise ValidationError(f"{self.name}: candidates must be strictly increasing")
        if self.default not in cands:
            raise ValidationError(f"{self.name}: default {self.default} not a candidate")

    def index_of(self, value: int) -> int:
        try:
            return self.candidates.index(value)
        except ValueError:
            raise ValidationError(f"{self.name}: {value} not a candidate") from None


@dataclass(frozen=True)
class ParamSpace:
    """The ordered knob catalog for one tiering solution."""

    solution: str
    specs: tuple[ParamSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ValidationError(f"{self.solution}: duplicate spec names in {names}")
        if self.cardinality() < 1:
            raise ValidationError(f"{self.solution}: empty action space")

    def cardinality(self) -> int:
        n = 1
        for s in self.specs:
            n *= len(s.candidates)
        return n

    def spec(self, name: str) -> ParamSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise ValidationError(f"{self.solution}: unknown parameter {name!r}")

    def default_config(self) -> "ParamConfig":
        return ParamConfig(tuple(s.default for s in self.specs))

    def config_from_mapping(self, mapping: dict[str, int]) -> "ParamConfig":
        return ParamConfig(tuple(int(mapping[s.name]) for s in self.specs))

    def indices_of(self, cfg: "ParamConfig") -> tuple[int, ...]:
        if len(cfg.values) != len(self.specs):
            raise ValidationError("config arity does not match space")
        return tuple(s.index_of(v) for s, v in zip(self.specs, cfg.values))

    def config_from_indices(self, indices) -> "ParamConfig":
        return ParamConfig(tuple(s.candidates[i] for s, i in zip(self.specs, indices)))

    def to_dict(self) -> dict:
        return {
            "solution": self.solution,
            "specs": [
                {
                    "name": s.name,
                    "candidates": list(s.candidates),
                    "default": s.default,
                    "apply_path": s.apply_path,
                }
                for s in self.specs
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSpace":
        specs = tuple(
            ParamSpec(
                name=s["name"],
                candidates=tuple(s["candidates"]),
                default=s["default"],
                apply_path=s.get("apply_path"),
            )
            for s in d["specs"]
        )
        return cls(solution=d["solution"], specs=specs)


@dataclass(frozen=True)
class ParamConfig:
    """One concrete value assignment, ordered like the owning ParamSpace."""

    values: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))

    def as_mapping(self, space: ParamSpace) -> dict[str, int]:
        if len(self.values) != len(space.specs):
            raise ValidationError("config arity does not match space")
        return {s.name: v for s, v in zip(space.specs, self.values)}


def validate_config(space: ParamSpace, cfg: ParamConfig) -> str | None:
    """Check cfg against space; returns None if valid, else a violation message.

    Arity mismatches are structural violations; otherwise the first dimension
    whose value is not a listed candidate is reported.
    """
    if len(cfg.values) != len(space.specs):
        return (
            f"structural violation: config has {len(cfg.values)} values, "
            f"space {space.solution!r} has {len(space.specs)} parameters"
        )
    for i, (spec, value) in enumerate(zip(space.specs, cfg.values)):
        if value not in spec.candidates:
            return (
                f"dimension {i} ({spec.name}): value {value} not in "
                f"candidates {list(spec.candidates)}"
            )
    return None


@dataclass(frozen=True)
class DataPoint:
    """One offline observation: state, the config applied in it, and the IPC
    measured over the following interval (the aftermath of that choice)."""

    ws: WorkloadState
    config: ParamConfig
    ipc: float

    def __post_init__(self):
        if not (math.isfinite(self.ipc) and self.ipc > 0):
            raise ValidationError(f"ipc must be positive and finite, got {self.ipc!r}")

    def to_dict(self) -> dict:
        return {"ws": list(self.ws.as_array()), "config": list(self.config.values), "ipc": self.ipc}

    @classmethod
    def from_dict(cls, d: dict) -> "DataPoint":
        return cls(
            ws=WorkloadState.from_array(d["ws"]),
            config=ParamConfig(tuple(d["config"])),
            ipc=float(d["ipc"]),
        )


@dataclass
class PerfDatabase:
    """The offline performance database plus the IPC bounds used for rewards."""

    space: ParamSpace
    points: list[DataPoint] = field(default_factory=list)
    ipc_min: float = math.inf
    ipc_max: float = -math.inf

    def append(self, point: DataPoint) -> None:
        err = validate_config(self.space, point.config)
        if err is not None:
            raise ValidationError(err)
        self.points.append(point)
        if point.ipc < self.ipc_min:
            self.ipc_min = point.ipc
        if point.ipc > self.ipc_max:
            self.ipc_max = point.ipc

    def __len__(self) -> int:
        return len(self.points)

    def ws_matrix(self) -> np.ndarray:
        return np.array([p.ws.as_array() for p in self.points], dtype=np.float64)

    def ipc_vector(self) -> np.ndarray:
        return np.array([p.ipc for p in self.points], dtype=np.float64)

    @classmethod
    def from_points(cls, space: ParamSpace, points) -> "PerfDatabase":
        db = cls(space=space)
        for p in points:
            db.append(p)
        return db


def weighted_distance(a: WorkloadState, b: WorkloadState, w) -> float:
    """Weighted Euclidean distance between two workload states.

    w must be 5 non-negative reals summing to 1. Zero-weight dimensions do not
    contribute, so the result is a pseudo-metric restricted to the supported
    dimensions.
    """
    wv = np.asarray(w, dtype=np.float64)
    if wv.shape != (WS_DIM,):
        raise ValidationError(f"weight vector must have {WS_DIM} entries")
    if np.any(wv < 0):
        raise ValidationError("weights must be non-negative")
    if abs(float(wv.sum()) - 1.0) > WEIGHT_SUM_TOL:
        raise ValidationError(f"weights must sum to 1, got {wv.sum()!r}")
    diff = a.as_array() - b.as_array()
    return float(np.sqrt(np.dot(wv, diff * diff)))


def reward_from_ipc(ipc: float, ipc_min: float, ipc_max: float) -> float:
    """Map an IPC observation into [-1, 1] against offline bounds.

    Linear in ipc on [ipc_min, ipc_max] with the endpoints mapping to -1/+1;
    out-of-range observations are clamped so the online reward stays bounded
    even when the live workload escapes the offline IPC envelope.
    """
    if not ipc_max > ipc_min:
        raise ValidationError(f"ipc_max ({ipc_max!r}) must exceed ipc_min ({ipc_min!r})")
    r = 2.0 * (ipc - ipc_min) / (ipc_max - ipc_min) - 1.0
    return min(1.0, max(-1.0, r))


def dumps_canonical(obj) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace variance)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
