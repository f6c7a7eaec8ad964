"""Deterministic tiered-memory environment.

Produces one (WorkloadState, IPC) observation per tuning interval as a
function of the applied knob configuration. The model is deliberately
desk-scale: pages are 1 MB-granularity units, profiling is a per-page
detection lottery whose coverage follows scan_size_mb, and demotion follows
the kernel's per-ten-thousand watermark semantics. The IPC cost function is
divisive:

    ipc = base_ipc / (1 + slow_penalty * slow_frac
                        + migration_cost * pages_migrated
                        + profiling_cost * scan_size_mb)

which reproduces the qualitative trade-offs of real tiering knobs (prompter
demotion frees fast memory but burns migration bandwidth; wider scans detect
hotness sooner but tax every interval) while keeping closed-form boundary
behavior for tests.

Hotness accounting: a detected page gains +1 count (capped), an undetected
page decays -1 (floored at 0), so stale pages age out and become demotion
victims. Detection only ever samples the current hot set; cold pages never
accumulate counts.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ParamConfig,
    ParamSpace,
    ValidationError,
    WorkloadState,
    validate_config,
)
from .catalog import load_catalog

# One page models 1 MB of working set; scan_size_mb / (page_count * PAGE_MB)
# is the per-interval probability a hot page is covered by profiling.
PAGE_MB = 1.0
# A detection credits the page with an estimated access count proportional to
# its traffic share (ACCESS_SCALE converts weight to a per-interval access
# figure). Counts saturate at the cap and cool by COUNT_DECAY per undetected
# interval, so placement decisions keep memory of hotness across sparse scans
# while stale pages still age out in bounded time.
ACCESS_SCALE = 1000.0
COUNT_CAP = 8.0
COUNT_DECAY = 0.25
# Uniform jitter half-width applied to every emitted WS ratio.
WS_JITTER = 0.01

SIM_SPEC_NAMES = ("scan_size_mb", "hot_threshold", "watermark_scale_factor", "demote_scale_factor")

ORACLE_MAX_CONFIGS = 10_000

SCENARIO_NAMES = ("phased-graph", "stable-hot", "shifting-hot", "uniform-cold")


class SimError(ValueError):
    """Invalid simulator input: bad config, capacity, or scenario name."""


@dataclass(frozen=True)
class Phase:
    """One execution phase of a synthetic workload.

    hot_set maps page id -> conditional access weight (weights sum to 1
    within the hot set); hot_mass is the fraction of total traffic landing on
    the hot set, the remaining 1 - hot_mass is spread uniformly over all
    page_count pages. Low-reuse phases are modeled with small hot_mass.
    """

    duration: int
    page_count: int
    hot_set: dict[int, float]
    hot_mass: float
    hot_set_drift: float
    base_ipc: float
    cache_profile: tuple[float, float]
    read_fraction: float

    def __post_init__(self):
        if self.duration < 1:
            raise SimError("phase duration must be >= 1 interval")
        if self.page_count < 1:
            raise SimError("page_count must be >= 1")
        if not self.hot_set:
            raise SimError("hot_set must be non-empty")
        wsum = sum(self.hot_set.values())
        if abs(wsum - 1.0) > 1e-9:
            raise SimError(f"hot set weights must sum to 1, got {wsum}")
        if any(w < 0 for w in self.hot_set.values()):
            raise SimError("hot set weights must be non-negative")
        if any(not 0 <= p < self.page_count for p in self.hot_set):
            raise SimError("hot_set pages must lie within [0, page_count)")
        if not 0.0 <= self.hot_mass <= 1.0:
            raise SimError("hot_mass must be in [0, 1]")
        if not 0.0 <= self.hot_set_drift <= 1.0:
            raise SimError("hot_set_drift must be in [0, 1]")
        if not self.base_ipc > 0:
            raise SimError("base_ipc must be positive")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise SimError("read_fraction must be in [0, 1]")


@dataclass(frozen=True)
class SimWorkload:
    name: str
    phases: tuple[Phase, ...]
    seed: int
    fast_capacity: int

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.phases:
            raise SimError("workload needs at least one phase")
        if self.fast_capacity < 1:
            raise SimError("fast_capacity must be >= 1 page")

    @property
    def cycle_length(self) -> int:
        return sum(p.duration for p in self.phases)

    def max_page_count(self) -> int:
        return max(p.page_count for p in self.phases)


@dataclass(frozen=True)
class SimCostModel:
    """Coefficients of the divisive IPC penalty. Calibration knobs, not
    measurements; acceptance checks are phrased relative to the oracle."""

    slow_penalty: float = 5.0
    migration_cost: float = 0.002
    profiling_cost: float = 1e-6

    def __post_init__(self):
        if not (math.isfinite(self.slow_penalty) and self.slow_penalty > 0):
            raise SimError("slow_penalty must be positive and finite")
        if not (math.isfinite(self.migration_cost) and self.migration_cost > 0):
            raise SimError("migration_cost must be positive and finite")
        if not (math.isfinite(self.profiling_cost) and self.profiling_cost >= 0):
            raise SimError("profiling_cost must be non-negative and finite")


@dataclass
class StepStats:
    promoted: int
    demoted: int
    detected: int
    phase_index: int
    slow_frac: float


@dataclass
class SimState:
    """Mutable stepper state: placement, hotness estimates, phase clock, RNG."""

    fast_capacity: int
    in_fast: np.ndarray
    counts: np.ndarray
    phase_index: int
    phase_clock: int
    hot_pages: np.ndarray
    hot_weights: np.ndarray
    rng: np.random.Generator
    interval: int = 0

    def snapshot(self) -> dict:
        return {
            "in_fast": self.in_fast.copy(),
            "counts": self.counts.copy(),
            "phase_index": self.phase_index,
            "phase_clock": self.phase_clock,
            "hot_pages": self.hot_pages.copy(),
            "hot_weights": self.hot_weights.copy(),
            "rng_state": self.rng.bit_generator.state,
            "interval": self.interval,
        }

    def restore(self, snap: dict) -> None:
        self.in_fast = snap["in_fast"].copy()
        self.counts = snap["counts"].copy()
        self.phase_index = snap["phase_index"]
        self.phase_clock = snap["phase_clock"]
        self.hot_pages = snap["hot_pages"].copy()
        self.hot_weights = snap["hot_weights"].copy()
        self.rng.bit_generator.state = snap["rng_state"]
        self.interval = snap["interval"]


def sim_param_space() -> ParamSpace:
    return load_catalog()["sim"]


class TieredMemorySim:
    """Steps a SimWorkload one tuning interval at a time under a knob config.

    Deterministic: identical (workload, seed, config sequence) produce
    bit-identical traces. Single-threaded; run independent instances for
    parallel evaluation.
    """

    def __init__(self, workload: SimWorkload, cost: SimCostModel | None = None,
                 space: ParamSpace | None = None):
        self.workload = workload
        self.cost = cost if cost is not None else SimCostModel()
        self.space = space if space is not None else sim_param_space()
        missing = [n for n in SIM_SPEC_NAMES if all(s.name != n for s in self.space.specs)]
        if missing:
            raise SimError(f"sim param space lacks required knobs: {missing}")
        self.current_config = self.space.default_config()
        self.state: SimState | None = None
        self.reset()

    def reset(self) -> None:
        wl = self.workload
        n = wl.max_page_count()
        phase = wl.phases[0]
        hot_pages = np.fromiter(phase.hot_set.keys(), dtype=np.int64)
        hot_weights = np.fromiter(phase.hot_set.values(), dtype=np.float64)
        self.state = SimState(
            fast_capacity=wl.fast_capacity,
            in_fast=np.zeros(n, dtype=bool),
            counts=np.zeros(n, dtype=np.float64),
            phase_index=0,
            phase_clock=0,
            hot_pages=hot_pages,
            hot_weights=hot_weights,
            rng=np.random.default_rng(wl.seed),
        )
        self.current_config = self.space.default_config()

    def set_config(self, cfg: ParamConfig) -> None:
        err = validate_config(self.space, cfg)
        if err is not None:
            raise SimError(err)
        self.current_config = cfg

    def snapshot(self) -> dict:
        return self.state.snapshot()

    def restore(self, snap: dict) -> None:
        self.state.restore(snap)

    def step(self, cfg: ParamConfig | None = None) -> tuple[WorkloadState, float, StepStats]:
        """Advance one tuning interval under cfg (or the last applied config)."""
        if cfg is not None:
            self.set_config(cfg)
        st = self.state
        knobs = self.current_config.as_mapping(self.space)
        scan_mb = knobs["scan_size_mb"]
        hot_threshold = knobs["hot_threshold"]
        wsf = knobs["watermark_scale_factor"]
        dsf = knobs["demote_scale_factor"]

        self._advance_phase_if_needed()
        phase = self.workload.phases[st.phase_index]

        self._drift_hot_set(phase)
        detected = self._profile(phase, scan_mb)
        demoted = self._demote(wsf, dsf)
        promoted = self._promote(phase, hot_threshold)

        slow_frac = self._slow_fraction(phase)
        penalty = (
            self.cost.slow_penalty * slow_frac
            + self.cost.migration_cost * (promoted + demoted)
            + self.cost.profiling_cost * scan_mb
        )
        ipc = phase.base_ipc / (1.0 + penalty)

        ws = self._emit_ws(phase, slow_frac)
        stats = StepStats(
            promoted=promoted,
            demoted=demoted,
            detected=detected,
            phase_index=st.phase_index,
            slow_frac=slow_frac,
        )
        st.phase_clock += 1
        st.interval += 1
        return ws, ipc, stats

    # -- stepping internals ------------------------------------------------
    # RNG draw counts below never depend on the applied config, so runs that
    # differ only in config share identical random streams. Tests rely on it.

    def _advance_phase_if_needed(self) -> None:
        st = self.state
        phase = self.workload.phases[st.phase_index]
        if st.phase_clock >= phase.duration:
            st.phase_index = (st.phase_index + 1) % len(self.workload.phases)
            st.phase_clock = 0
            nxt = self.workload.phases[st.phase_index]
            st.hot_pages = np.fromiter(nxt.hot_set.keys(), dtype=np.int64)
            st.hot_weights = np.fromiter(nxt.hot_set.values(), dtype=np.float64)

    def _drift_hot_set(self, phase: Phase) -> None:
        if phase.hot_set_drift <= 0:
            return
        st = self.state
        n_hot = len(st.hot_pages)
        frac = phase.hot_set_drift * n_hot
        n = int(frac)
        if st.rng.random() < frac - n:
            n += 1
        if n == 0:
            return
        pool = np.setdiff1d(np.arange(phase.page_count, dtype=np.int64), st.hot_pages)
        n = min(n, len(pool), n_hot)
        if n == 0:
            return
        victims = st.rng.choice(n_hot, size=n, replace=False)
        replacements = st.rng.choice(pool, size=n, replace=False)
        # weight stays at the slot, so the replacement inherits it
        st.hot_pages = st.hot_pages.copy()
        st.hot_pages[victims] = replacements

    def _profile(self, phase: Phase, scan_mb: int) -> int:
        st = self.state
        working_set_mb = phase.page_count * PAGE_MB
        p = min(1.0, scan_mb / working_set_mb)
        u = st.rng.random(len(st.hot_pages))
        detected = u < p
        detected_pages = st.hot_pages[detected]
        est_accesses = 1.0 + np.round(
            ACCESS_SCALE * phase.hot_mass * st.hot_weights[detected])
        prior = st.counts[detected_pages]
        st.counts = np.maximum(st.counts - COUNT_DECAY, 0.0)
        st.counts[detected_pages] = np.minimum(prior + est_accesses, COUNT_CAP)
        return int(len(detected_pages))

    def _demote(self, wsf: int, dsf: int) -> int:
        st = self.state
        fast_pages = np.flatnonzero(st.in_fast)
        free = st.fast_capacity - len(fast_pages)
        wake_mark = st.fast_capacity * wsf / 10000.0
        target_free = st.fast_capacity * dsf / 10000.0
        if free >= wake_mark:
            return 0
        need = math.ceil(target_free - free)
        if need <= 0:
            return 0
        k = min(need, len(fast_pages))
        order = np.lexsort((fast_pages, st.counts[fast_pages]))
        victims = fast_pages[order[:k]]
        st.in_fast[victims] = False
        return int(k)

    def _promote(self, phase: Phase, hot_threshold: int) -> int:
        st = self.state
        universe = np.arange(phase.page_count, dtype=np.int64)
        slow = universe[~st.in_fast[:phase.page_count]]
        candidates = slow[st.counts[slow] >= hot_threshold]
        if len(candidates) == 0:
            return 0
        free = st.fast_capacity - int(st.in_fast.sum())
        if free <= 0:
            return 0
        order = np.lexsort((candidates, -st.counts[candidates]))
        chosen = candidates[order[:free]]
        st.in_fast[chosen] = True
        return int(len(chosen))

    def _slow_fraction(self, phase: Phase) -> float:
        st = self.state
        hot_on_slow = float(st.hot_weights[~st.in_fast[st.hot_pages]].sum())
        n_fast_in_universe = int(st.in_fast[:phase.page_count].sum())
        background_slow = (phase.page_count - n_fast_in_universe) / phase.page_count
        return phase.hot_mass * hot_on_slow + (1.0 - phase.hot_mass) * background_slow

    def _emit_ws(self, phase: Phase, slow_frac: float) -> WorkloadState:
        j = self.state.rng.uniform(-WS_JITTER, WS_JITTER, size=5)
        l2, l3 = phase.cache_profile
        rf = phase.read_fraction
        clip = lambda x: float(min(1.0, max(0.0, x)))
        return WorkloadState(
            l2_hit=clip(l2 + j[0]),
            l3_hit=clip(l3 + j[1]),
            slow_read_ratio=clip(slow_frac * rf + j[2]),
            slow_write_ratio=clip(slow_frac * (1.0 - rf) + j[3]),
            total_read_ratio=clip(rf + j[4]),
        )


def _weighted_hot_set(rng: np.random.Generator, pages: np.ndarray,
                      uniform: bool = False) -> dict[int, float]:
    if uniform:
        w = np.full(len(pages), 1.0 / len(pages))
    else:
        w = rng.uniform(0.5, 1.5, size=len(pages))
        w /= w.sum()
    return {int(p): float(x) for p, x in zip(pages, w)}


def _spread_hot_set(rng: np.random.Generator, page_count: int, size: int) -> dict[int, float]:
    pages = rng.choice(np.arange(page_count), size=size, replace=False)
    return _weighted_hot_set(rng, pages)


def make_scenario(name: str, seed: int) -> SimWorkload:
    """Build one of the canned reproducible workloads.

    phased-graph: three phases shaped like a graph benchmark (low-reuse
    generation, construction with a hot set larger than fast memory, then a
    small stable hot set). stable-hot / shifting-hot / uniform-cold mirror
    the classic microbenchmark access patterns.
    """
    rng = np.random.default_rng(seed)
    if name == "phased-graph":
        # The graph pages are shared across phases: generation writes the
        # edge lists that construction builds from, and traversal revisits
        # the graph's best-connected subset. Only the hot subset, its traffic
        # share, and the access shape change per phase.
        capacity = 512
        pages = rng.permutation(np.arange(2048))
        graph_pages, traversal_pages = pages[:1536], pages[1536:]
        generation = Phase(
            duration=20, page_count=2048,
            hot_set=_weighted_hot_set(rng, rng.choice(graph_pages, 300, replace=False)),
            hot_mass=0.20, hot_set_drift=0.30,
            base_ipc=1.2, cache_profile=(0.55, 0.45), read_fraction=0.35,
        )
        construction = Phase(
            duration=16, page_count=2048,
            hot_set=_weighted_hot_set(rng, graph_pages, uniform=True),
            hot_mass=0.85, hot_set_drift=0.005,
            base_ipc=1.0, cache_profile=(0.50, 0.30), read_fraction=0.50,
        )
        bfs = Phase(
            duration=90, page_count=2048,
            hot_set=_weighted_hot_set(rng, traversal_pages),
            hot_mass=0.92, hot_set_drift=0.0,
            base_ipc=1.5, cache_profile=(0.78, 0.65), read_fraction=0.85,
        )
        return SimWorkload(name=name, phases=(generation, construction, bfs),
                           seed=seed, fast_capacity=capacity)
    if name == "stable-hot":
        phase = Phase(
            duration=60, page_count=8192,
            hot_set=_spread_hot_set(rng, 8192, 256),
            hot_mass=0.90, hot_set_drift=0.0,
            base_ipc=1.4, cache_profile=(0.70, 0.60), read_fraction=0.70,
        )
        return SimWorkload(name=name, phases=(phase,), seed=seed, fast_capacity=512)
    if name == "shifting-hot":
        a = Phase(
            duration=40, page_count=2048,
            hot_set=_spread_hot_set(rng, 2048, 256),
            hot_mass=0.90, hot_set_drift=0.05,
            base_ipc=1.3, cache_profile=(0.65, 0.55), read_fraction=0.60,
        )
        b = Phase(
            duration=40, page_count=2048,
            hot_set=_spread_hot_set(rng, 2048, 192),
            hot_mass=0.88, hot_set_drift=0.15,
            base_ipc=1.1, cache_profile=(0.60, 0.40), read_fraction=0.45,
        )
        return SimWorkload(name=name, phases=(a, b), seed=seed, fast_capacity=512)
    if name == "uniform-cold":
        phase = Phase(
            duration=60, page_count=4096,
            hot_set=_spread_hot_set(rng, 4096, 64),
            hot_mass=0.05, hot_set_drift=0.0,
            base_ipc=0.9, cache_profile=(0.40, 0.25), read_fraction=0.55,
        )
        return SimWorkload(name=name, phases=(phase,), seed=seed, fast_capacity=512)
    raise SimError(f"unknown scenario {name!r}; choose from {SCENARIO_NAMES}")


def _entry_snapshot(sim: TieredMemorySim, phase_index: int) -> dict:
    """State at the start of the requested phase after running everything
    before it under the default config."""
    sim.reset()
    default = sim.space.default_config()
    for _ in range(sum(p.duration for p in sim.workload.phases[:phase_index])):
        sim.step(default)
    return sim.snapshot()


def oracle_best_config(workload: SimWorkload, phase_index: int,
                       cost: SimCostModel | None = None,
                       space: ParamSpace | None = None) -> tuple[ParamConfig, float]:
    """Brute-force per-phase optimum: simulate the phase under every joint
    config from an identical entry state, return the argmax mean-IPC config.

    Ties break toward the lexicographically smallest config. Refuses joint
    spaces above ORACLE_MAX_CONFIGS.
    """
    sim = TieredMemorySim(workload, cost=cost, space=space)
    if sim.space.cardinality() > ORACLE_MAX_CONFIGS:
        raise SimError(
            f"joint space has {sim.space.cardinality()} configs, "
            f"refusing exhaustive search above {ORACLE_MAX_CONFIGS}"
        )
    if not 0 <= phase_index < len(workload.phases):
        raise SimError(f"phase_index {phase_index} out of range")
    entry = _entry_snapshot(sim, phase_index)
    duration = workload.phases[phase_index].duration

    best_cfg: ParamConfig | None = None
    best_ipc = -math.inf
    for values in itertools.product(*(s.candidates for s in sim.space.specs)):
        cfg = ParamConfig(values)
        sim.restore(entry)
        total = 0.0
        for _ in range(duration):
            _, ipc, _ = sim.step(cfg)
            total += ipc
        mean_ipc = total / duration
        if mean_ipc > best_ipc:
            best_ipc = mean_ipc
            best_cfg = cfg
    return best_cfg, best_ipc


@dataclass(frozen=True)
class SweepRow:
    value: int
    ipc: float
    speedup: float


def param_sweep(workload: SimWorkload, spec_name: str,
                cost: SimCostModel | None = None,
                space: ParamSpace | None = None) -> list[SweepRow]:
    """Static one-knob sensitivity sweep: one full workload cycle per
    candidate value with every other knob at its default, normalized by the
    all-defaults run."""
    sim = TieredMemorySim(workload, cost=cost, space=space)
    spec = sim.space.spec(spec_name)
    duration = workload.cycle_length

    def run_mean_ipc(cfg: ParamConfig) -> float:
        sim.reset()
        total = 0.0
        for _ in range(duration):
            _, ipc, _ = sim.step(cfg)
            total += ipc
        return total / duration

    default_cfg = sim.space.default_config()
    default_ipc = run_mean_ipc(default_cfg)

    rows = []
    defaults = {s.name: s.default for s in sim.space.specs}
    for value in spec.candidates:
        knobs = dict(defaults)
        knobs[spec_name] = value
        cfg = sim.space.config_from_mapping(knobs)
        ipc = run_mean_ipc(cfg)
        rows.append(SweepRow(value=value, ipc=ipc, speedup=ipc / default_ipc))
    return rows
