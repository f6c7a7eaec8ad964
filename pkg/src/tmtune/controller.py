"""The online tuning loop and the parameter-application backends.

Every tuning period the controller takes the freshest workload state, asks
the outlier test which model is competent (in-cluster -> weighted K-NN,
outlier -> the PPO policy), pushes the chosen configuration through a
backend, and attaches the IPC observed over the following interval back to
the decision as its reward. A single thread owns metrics, model queries,
agent updates, and backend writes.

K-NN-sourced intervals never enter the PPO rollout: those actions were not
drawn from the policy, and the method carries no importance correction for
off-policy data. They are logged only.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

from . import artifacts
from .cluster import ClusterIndex, KMeansModel, knn_query, outlier_check
from .collector import EmptyIntervalError
from .core import (
    ParamConfig,
    ParamSpace,
    ValidationError,
    WorkloadState,
    reward_from_ipc,
    validate_config,
)
from .rl import PPOAgent

logger = logging.getLogger(__name__)

DECISION_LOG_KIND = "decision-log"
REPORT_KIND = "run-report"

SOURCE_KNN = "KNN"
SOURCE_RL = "RL"
SOURCE_DEFAULT = "DEFAULT"

MIN_TUNING_PERIOD = 1.0


class BackendError(RuntimeError):
    """The parameter backend could not apply a configuration."""


@dataclass(frozen=True)
class TunerConfig:
    tuning_period: float = 10.0
    knn_k: int = 25
    rl_online_learning: bool = True
    latency_budget_ms: float = 10.0

    def __post_init__(self):
        if self.tuning_period < MIN_TUNING_PERIOD:
            raise ValidationError(
                f"tuning_period must be >= {MIN_TUNING_PERIOD}s; shorter periods "
                "leave no time for the workload to respond to a decision"
            )
        if self.knn_k < 1:
            raise ValidationError("knn_k must be >= 1")


@dataclass
class TuningDecision:
    interval: int
    source: str
    config: ParamConfig
    cluster_id: int | None = None
    distance: float | None = None
    ipc: float | None = None
    reward: float | None = None
    applied: bool = True
    latency_ms: float = 0.0

    def to_record(self) -> dict:
        return {
            "interval": self.interval,
            "source": self.source,
            "config": list(self.config.values),
            "cluster_id": self.cluster_id,
            "distance": self.distance,
            "ipc": self.ipc,
            "reward": self.reward,
            "applied": self.applied,
            "latency_ms": self.latency_ms,
        }


@dataclass
class ApplyEntry:
    param: str
    path: str | None
    value: int
    status: str            # applied | unchanged | failed | no-path
    error: str | None = None


@dataclass
class ApplyReport:
    entries: list[ApplyEntry] = field(default_factory=list)

    def failed(self) -> list[ApplyEntry]:
        return [e for e in self.entries if e.status == "failed"]


class ParamBackend:
    """Interface to whatever actually receives the knob values."""

    mode = "abstract"

    def apply(self, space: ParamSpace, cfg: ParamConfig) -> ApplyReport:
        raise NotImplementedError


class SimBackend(ParamBackend):
    """Applies configurations to a simulator instance."""

    mode = "sim"

    def __init__(self, sim):
        self.sim = sim
        self._last: ParamConfig | None = None

    def apply(self, space: ParamSpace, cfg: ParamConfig) -> ApplyReport:
        self.sim.set_config(cfg)
        report = ApplyReport()
        for i, (spec, value) in enumerate(zip(space.specs, cfg.values)):
            unchanged = self._last is not None and self._last.values[i] == value
            report.entries.append(ApplyEntry(
                param=spec.name, path=None, value=value,
                status="unchanged" if unchanged else "applied",
            ))
        self._last = cfg
        return report


class SysfsDryRunBackend(ParamBackend):
    """Emits the exact path -> value write list without touching the filesystem."""

    mode = "sysfs-dryrun"

    def __init__(self):
        self._last: dict[str, int] = {}
        self.write_list: list[tuple[str, str]] = []

    def apply(self, space: ParamSpace, cfg: ParamConfig) -> ApplyReport:
        report = ApplyReport()
        for spec, value in zip(space.specs, cfg.values):
            if spec.apply_path is None:
                report.entries.append(ApplyEntry(spec.name, None, value, "no-path"))
                continue
            if self._last.get(spec.apply_path) == value:
                report.entries.append(
                    ApplyEntry(spec.name, spec.apply_path, value, "unchanged"))
                continue
            self.write_list.append((spec.apply_path, str(value)))
            self._last[spec.apply_path] = value
            report.entries.append(ApplyEntry(spec.name, spec.apply_path, value, "applied"))
        return report

    def save_write_list(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(("path", "value"))
            writer.writerows(self.write_list)


class SysfsLiveBackend(ParamBackend):
    """Writes decimal values to the catalog's sysfs/procfs paths.

    Refuses to construct without the explicit acknowledgment flag: these are
    system-wide kernel knobs.
    """

    mode = "sysfs-live"

    def __init__(self, acknowledged: bool = False):
        if not acknowledged:
            raise BackendError(
                "live sysfs writes require the --i-know-this-writes-sysfs flag"
            )
        self._last: dict[str, int] = {}

    def apply(self, space: ParamSpace, cfg: ParamConfig) -> ApplyReport:
        report = ApplyReport()
        for spec, value in zip(space.specs, cfg.values):
            if spec.apply_path is None:
                report.entries.append(ApplyEntry(spec.name, None, value, "no-path"))
                continue
            if self._last.get(spec.apply_path) == value:
                report.entries.append(
                    ApplyEntry(spec.name, spec.apply_path, value, "unchanged"))
                continue
            try:
                with open(spec.apply_path, "w") as f:
                    f.write(str(value))
            except OSError as e:
                report.entries.append(ApplyEntry(
                    spec.name, spec.apply_path, value, "failed", error=str(e)))
                continue
            self._last[spec.apply_path] = value
            report.entries.append(ApplyEntry(spec.name, spec.apply_path, value, "applied"))
        return report


def apply_config(backend: ParamBackend, space: ParamSpace,
                 cfg: ParamConfig) -> ApplyReport:
    """Validate then push one configuration through the backend. The
    controller never emits a config outside the space; this is the enforcement
    point."""
    err = validate_config(space, cfg)
    if err is not None:
        raise BackendError(f"refusing to apply invalid config: {err}")
    return backend.apply(space, cfg)


class HybridTuner:
    """Dispatches each state to K-NN (in-cluster) or the RL policy (outlier).

    A missing model degrades every decision to the catalog default with a
    logged alarm rather than failing the loop.
    """

    def __init__(self, space: ParamSpace, model: KMeansModel | None,
                 index: ClusterIndex | None, agent: PPOAgent | None,
                 tcfg: TunerConfig | None = None):
        self.space = space
        self.model = model
        self.index = index
        self.agent = agent
        self.tcfg = tcfg if tcfg is not None else TunerConfig()
        self._interval = 0
        self._pending_rl: tuple[WorkloadState, dict] | None = None
        if model is None or index is None:
            logger.error("tuning model unavailable; degrading to DEFAULT decisions")

    @property
    def ipc_bounds(self) -> tuple[float, float] | None:
        if self.index is None:
            return None
        return self.index.ipc_min, self.index.ipc_max

    def tune_step(self, ws: WorkloadState) -> TuningDecision:
        """Decide the configuration to apply for the upcoming interval."""
        self._interval += 1
        if self.model is None or self.index is None:
            return TuningDecision(interval=self._interval, source=SOURCE_DEFAULT,
                                  config=self.space.default_config())
        check = outlier_check(self.model, ws)
        if not check.is_outlier:
            cfg, _, cid = knn_query(self.index, self.model, ws, self.tcfg.knn_k)
            self._pending_rl = None
            return TuningDecision(interval=self._interval, source=SOURCE_KNN,
                                  config=cfg, cluster_id=cid,
                                  distance=check.distance)
        if self.agent is None:
            logger.error("outlier state but no RL agent; using default config")
            return TuningDecision(interval=self._interval, source=SOURCE_DEFAULT,
                                  config=self.space.default_config(),
                                  cluster_id=check.cluster_id,
                                  distance=check.distance)
        act_info = self.agent.act(ws)
        self._pending_rl = (ws, act_info)
        return TuningDecision(interval=self._interval, source=SOURCE_RL,
                              config=act_info["config"],
                              cluster_id=check.cluster_id,
                              distance=check.distance)

    def feed_reward(self, decision: TuningDecision, ipc: float,
                    next_ws: WorkloadState) -> None:
        """Attach the aftermath IPC/reward to a decision; RL-sourced decisions
        additionally feed the agent's rollout when online learning is on."""
        decision.ipc = ipc
        bounds = self.ipc_bounds
        if bounds is None:
            return
        decision.reward = reward_from_ipc(ipc, *bounds)
        if (decision.source == SOURCE_RL and self.tcfg.rl_online_learning
                and self.agent is not None and self._pending_rl is not None):
            ws, act_info = self._pending_rl
            self._pending_rl = None
            diags = self.agent.observe(ws, act_info, decision.reward, next_ws)
            if diags is not None and diags.get("aborted"):
                logger.warning("PPO update aborted on non-finite loss; weights kept")


@dataclass
class RunReport:
    solution: str
    period: float
    decisions: list[TuningDecision] = field(default_factory=list)
    ipc_trace: list[float] = field(default_factory=list)
    ws_trace: list[list[float]] = field(default_factory=list)
    empty_intervals: int = 0
    baseline_mean_ipc: float | None = None

    @property
    def mean_ipc(self) -> float:
        return sum(self.ipc_trace) / len(self.ipc_trace) if self.ipc_trace else 0.0

    @property
    def speedup(self) -> float | None:
        if self.baseline_mean_ipc is None or self.baseline_mean_ipc <= 0:
            return None
        return self.mean_ipc / self.baseline_mean_ipc

    def latency_percentile(self, q: float) -> float:
        lats = sorted(d.latency_ms for d in self.decisions)
        if not lats:
            return 0.0
        pos = min(len(lats) - 1, math.ceil(q / 100.0 * len(lats)) - 1)
        return lats[max(pos, 0)]

    def to_dict(self) -> dict:
        return {
            "solution": self.solution,
            "period": self.period,
            "intervals": len(self.ipc_trace),
            "mean_ipc": self.mean_ipc,
            "baseline_mean_ipc": self.baseline_mean_ipc,
            "speedup": self.speedup,
            "empty_intervals": self.empty_intervals,
            "p99_latency_ms": self.latency_percentile(99),
            "sources": {
                s: sum(1 for d in self.decisions if d.source == s)
                for s in (SOURCE_KNN, SOURCE_RL, SOURCE_DEFAULT)
            },
        }

    def save(self, path: str) -> None:
        artifacts.write_json(path, REPORT_KIND, self.to_dict())

    def save_decision_log(self, path: str) -> None:
        artifacts.write_jsonl(
            path, DECISION_LOG_KIND,
            {"solution": self.solution, "period": self.period},
            (d.to_record() for d in self.decisions),
        )


def run_loop(env, backend: ParamBackend, tuner: HybridTuner,
             duration: float, baseline_env=None) -> RunReport:
    """Run ceil(duration / period) tuning intervals.

    The default config is applied before the first full interval (the
    startup DEFAULT decision); each subsequent decision is applied before the
    interval it governs. Configurations reach the environment only through
    the backend, so a dry-run backend observes an untouched system. A backend
    write failure is retried once, then the previous configuration is kept
    and the failure logged. Empty-metrics intervals skip their decision and
    are counted.

    With baseline_env given, the same number of intervals runs there under
    the catalog default, and the report carries the aggregate speedup.
    """
    space = tuner.space
    tcfg = tuner.tcfg
    n_intervals = math.ceil(duration / tcfg.tuning_period)
    report = RunReport(solution=space.solution, period=tcfg.tuning_period)
    if n_intervals <= 0:
        return report

    default_cfg = space.default_config()
    apply_config(backend, space, default_cfg)
    startup = TuningDecision(interval=0, source=SOURCE_DEFAULT, config=default_cfg)
    ws, ipc = _env_step_ipc(env)
    tuner.feed_reward(startup, ipc, ws)
    report.decisions.append(startup)
    report.ipc_trace.append(ipc)
    report.ws_trace.append(list(ws.as_array()))

    for _ in range(1, n_intervals):
        t0 = time.perf_counter()
        decision = tuner.tune_step(ws)
        decision.latency_ms = (time.perf_counter() - t0) * 1000.0
        try:
            apply_config(backend, space, decision.config)
        except BackendError as e:
            logger.warning("backend apply failed (%s); retrying once", e)
            try:
                apply_config(backend, space, decision.config)
            except BackendError as e2:
                logger.error("backend apply failed twice (%s); keeping previous config", e2)
                decision.applied = False
        try:
            ws, ipc = _env_step_ipc(env)
        except EmptyIntervalError as e:
            logger.warning("empty interval: %s; decision skipped", e)
            report.empty_intervals += 1
            report.decisions.append(decision)
            continue
        t1 = time.perf_counter()
        tuner.feed_reward(decision, ipc, ws)
        decision.latency_ms += (time.perf_counter() - t1) * 1000.0
        report.decisions.append(decision)
        report.ipc_trace.append(ipc)
        report.ws_trace.append(list(ws.as_array()))

    if baseline_env is not None:
        total = 0.0
        for _ in range(n_intervals):
            _, b_ipc = _env_step_ipc(baseline_env)
            total += b_ipc
        report.baseline_mean_ipc = total / n_intervals
    return report


def _env_step_ipc(env, cfg=None):
    out = env.step(cfg) if cfg is not None else env.step()
    return out[0], out[1]
