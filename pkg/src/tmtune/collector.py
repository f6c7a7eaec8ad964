"""Offline database collection and the metrics-source abstraction.

The collector drives an environment with uniformly random knob configurations
and records (state at decision time, applied config, IPC over the following
interval) triples — the aftermath pairing the lookup model is trained on.

Real hardware counters are abstracted behind MetricsSource; this package
ships a replay source (CSV of counter samples) and a stub that refuses, since
live PMU integration is out of scope. The simulator plugs in directly as an
environment.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import artifacts
from .core import (
    DataPoint,
    ParamConfig,
    ParamSpace,
    PerfDatabase,
    ValidationError,
    WorkloadState,
)

logger = logging.getLogger(__name__)

COUNTER_FIELDS = (
    "cycles",
    "instructions",
    "l2_hits",
    "l2_refs",
    "l3_hits",
    "l3_refs",
    "fast_read_bytes",
    "fast_write_bytes",
    "slow_read_bytes",
    "slow_write_bytes",
)


class EmptyIntervalError(ValueError):
    """The interval carried no cycles or no memory traffic; skip the step."""


class CollectionError(RuntimeError):
    """Environment failed mid-collection; .partial holds the points so far."""

    def __init__(self, message: str, partial: PerfDatabase):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class MetricsSample:
    """Monotonic since-boot style counters read at one instant."""

    cycles: int
    instructions: int
    l2_hits: int
    l2_refs: int
    l3_hits: int
    l3_refs: int
    fast_read_bytes: int
    fast_write_bytes: int
    slow_read_bytes: int
    slow_write_bytes: int

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(getattr(self, f) for f in COUNTER_FIELDS)


def derive_ws(prev: MetricsSample, cur: MetricsSample) -> tuple[WorkloadState, float]:
    """Turn two counter snapshots into a workload state and the interval IPC.

    Ratios come from counter deltas normalized by the interval's total memory
    traffic; cache hit rates from hit/reference deltas. Zero-cycle or
    zero-traffic intervals are empty and must be skipped by the caller.
    """
    deltas = {}
    for name in COUNTER_FIELDS:
        d = getattr(cur, name) - getattr(prev, name)
        if d < 0:
            raise ValidationError(f"counter {name} went backwards ({d})")
        deltas[name] = d
    if deltas["cycles"] == 0:
        raise EmptyIntervalError("zero cycles elapsed")
    total_traffic = (
        deltas["fast_read_bytes"] + deltas["fast_write_bytes"]
        + deltas["slow_read_bytes"] + deltas["slow_write_bytes"]
    )
    if total_traffic == 0:
        raise EmptyIntervalError("no memory traffic in interval")

    def hit_ratio(hits: int, refs: int) -> float:
        return hits / refs if refs > 0 else 0.0

    ws = WorkloadState(
        l2_hit=hit_ratio(deltas["l2_hits"], deltas["l2_refs"]),
        l3_hit=hit_ratio(deltas["l3_hits"], deltas["l3_refs"]),
        slow_read_ratio=deltas["slow_read_bytes"] / total_traffic,
        slow_write_ratio=deltas["slow_write_bytes"] / total_traffic,
        total_read_ratio=(deltas["fast_read_bytes"] + deltas["slow_read_bytes"]) / total_traffic,
    )
    ipc = deltas["instructions"] / deltas["cycles"]
    return ws, ipc


class MetricsSource:
    """Interface over counter providers. capability is live | replay | stub."""

    capability = "stub"

    def read(self) -> MetricsSample:
        raise NotImplementedError


class StubMetricsSource(MetricsSource):
    """Placeholder for live PMU integration; always refuses."""

    capability = "stub"

    def read(self) -> MetricsSample:
        raise NotImplementedError(
            "live hardware counters are unsupported; supply a replay file"
        )


class ReplayMetricsSource(MetricsSource):
    """Replays MetricsSample rows recorded to CSV; enforces monotonicity at load."""

    capability = "replay"

    def __init__(self, samples: list[MetricsSample]):
        if len(samples) < 2:
            raise ValidationError("replay needs at least two samples")
        for prev, cur in zip(samples, samples[1:]):
            for name in COUNTER_FIELDS:
                if getattr(cur, name) < getattr(prev, name):
                    raise ValidationError(
                        f"replay counter {name} not monotonic between rows"
                    )
        self.samples = samples
        self._pos = 0

    @classmethod
    def from_csv(cls, path: str) -> "ReplayMetricsSource":
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            missing = set(COUNTER_FIELDS) - set(reader.fieldnames or ())
            if missing:
                raise ValidationError(f"replay csv lacks columns: {sorted(missing)}")
            samples = [
                MetricsSample(**{k: int(row[k]) for k in COUNTER_FIELDS})
                for row in reader
            ]
        return cls(samples)

    def read(self) -> MetricsSample:
        if self._pos >= len(self.samples):
            raise RuntimeError("replay exhausted")
        s = self.samples[self._pos]
        self._pos += 1
        return s

    def exhausted(self) -> bool:
        return self._pos >= len(self.samples)


def write_replay_csv(path: str, samples: list[MetricsSample]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(COUNTER_FIELDS)
        for s in samples:
            writer.writerow(s.as_tuple())


class ReplayEnv:
    """Environment view over a replay source: one step per recorded interval.

    Configs are accepted (and recorded for pairing tests) but cannot influence
    the pre-recorded counters.
    """

    def __init__(self, source: ReplayMetricsSource):
        self.source = source
        self._prev = source.read()
        self.applied: list[ParamConfig | None] = []

    def step(self, cfg: ParamConfig | None = None) -> tuple[WorkloadState, float]:
        self.applied.append(cfg)
        if self.source.exhausted():
            raise RuntimeError("replay source exhausted")
        cur = self.source.read()
        ws, ipc = derive_ws(self._prev, cur)
        self._prev = cur
        return ws, ipc


class SimCollectorEnv:
    """Adapter giving the simulator the (step(cfg) -> ws, ipc) surface."""

    def __init__(self, sim):
        self.sim = sim

    @property
    def space(self) -> ParamSpace:
        return self.sim.space

    def step(self, cfg: ParamConfig) -> tuple[WorkloadState, float]:
        ws, ipc, _ = self.sim.step(cfg)
        return ws, ipc


def sample_uniform_config(space: ParamSpace, rng: np.random.Generator) -> ParamConfig:
    """Independent uniform draw per knob dimension."""
    return ParamConfig(
        tuple(s.candidates[rng.integers(len(s.candidates))] for s in space.specs)
    )


def collect_database(env, space: ParamSpace, period: float, target_points: int,
                     seed: int) -> PerfDatabase:
    """Run the random-configuration collection loop until target_points.

    Per interval: draw a uniform config, apply it, and pair the state observed
    at decision time with the IPC measured over the following interval. The
    first interval runs under the default config purely to obtain an initial
    state. Empty intervals are skipped with a log line; any other environment
    failure raises CollectionError carrying the partial database.

    Single control thread owns the loop and the env handle.
    """
    if target_points < 1:
        raise ValidationError("target_points must be >= 1")
    rng = np.random.default_rng(seed)
    db = PerfDatabase(space=space)
    db.meta = {"seed": seed, "period": period}
    try:
        ws_prev, _ = env.step(space.default_config())
    except EmptyIntervalError:
        raise CollectionError("warm-up interval was empty", partial=db) from None
    except Exception as e:
        raise CollectionError(f"environment failed during warm-up: {e}", partial=db) from e

    while len(db) < target_points:
        cfg = sample_uniform_config(space, rng)
        try:
            ws_next, ipc = env.step(cfg)
        except EmptyIntervalError as e:
            logger.warning("skipping empty interval: %s", e)
            continue
        except Exception as e:
            raise CollectionError(f"environment failed after {len(db)} points: {e}",
                                  partial=db) from e
        db.append(DataPoint(ws=ws_prev, config=cfg, ipc=ipc))
        ws_prev = ws_next
    return db


DB_KIND = "perf-database"


def save_database(path: str, db: PerfDatabase, seed: int | None = None,
                  period: float | None = None) -> None:
    meta = getattr(db, "meta", {})
    header = {
        "space": db.space.to_dict(),
        "seed": seed if seed is not None else meta.get("seed"),
        "period": period if period is not None else meta.get("period"),
        "points": len(db),
        "ipc_min": db.ipc_min,
        "ipc_max": db.ipc_max,
    }
    artifacts.write_jsonl(path, DB_KIND, header, (p.to_dict() for p in db.points))


def load_database(path: str) -> PerfDatabase:
    header, records = artifacts.read_jsonl(path, DB_KIND)
    space = ParamSpace.from_dict(header["space"])
    db = PerfDatabase.from_points(space, (DataPoint.from_dict(r) for r in records))
    db.meta = {"seed": header.get("seed"), "period": header.get("period")}
    if header.get("points") != len(db):
        raise artifacts.ArtifactError(
            f"{path}: header claims {header.get('points')} points, found {len(db)}"
        )
    return db
