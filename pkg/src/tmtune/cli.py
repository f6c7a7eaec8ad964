"""Command-line surface wiring the pipeline: collect -> fit -> pretrain ->
tune -> report, plus the static one-knob sweep.

Exit codes: 0 success, 1 usage error, 2 artifact/schema error,
3 environment/backend failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from . import __version__, artifacts
from .catalog import CATALOG_ENV_VAR, CATALOG_SCHEMA_VERSION, CatalogError, get_space
from .cluster import (
    ClusteringConfig,
    fit_cluster_model,
    load_model,
    model_database_path,
    save_model,
)
from .collector import (
    CollectionError,
    ReplayEnv,
    ReplayMetricsSource,
    SimCollectorEnv,
    collect_database,
    load_database,
    save_database,
)
from .controller import (
    BackendError,
    HybridTuner,
    SimBackend,
    SysfsDryRunBackend,
    SysfsLiveBackend,
    TunerConfig,
    run_loop,
)
from .core import ValidationError
from .rl import PPOAgent, PPOConfig, PolicyNet, bc_pretrain, build_expert_dataset, load_weights, save_weights
from .sim import SCENARIO_NAMES, SimCostModel, SimError, TieredMemorySim, make_scenario, param_sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ARTIFACT = 2
EXIT_ENVIRONMENT = 3

MANIFEST_KIND = "run-manifest"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def write_manifest(primary_path: str, command: str, seeds: dict,
                   artifact_paths: dict, catalog_path: str | None) -> None:
    body = {
        "tool_version": __version__,
        "command": command,
        "catalog": {
            "source": catalog_path or os.environ.get(CATALOG_ENV_VAR) or "<builtin>",
            "version": CATALOG_SCHEMA_VERSION,
        },
        "seeds": seeds,
        "artifacts": artifact_paths,
    }
    artifacts.write_json(primary_path + ".manifest.json", MANIFEST_KIND, body)


def parse_env(spec: str, seed: int, cost: SimCostModel | None = None):
    """Build the environment from an --env value (sim:<scenario> | replay:<file>)."""
    kind, _, arg = spec.partition(":")
    if kind == "sim":
        if arg not in SCENARIO_NAMES:
            raise SimError(f"unknown scenario {arg!r}; choose from {SCENARIO_NAMES}")
        workload = make_scenario(arg, seed)
        return TieredMemorySim(workload, cost=cost)
    if kind == "replay":
        return ReplayEnv(ReplayMetricsSource.from_csv(arg))
    raise UsageError(f"--env must be sim:<scenario> or replay:<file>, got {spec!r}")


def cmd_collect(args) -> int:
    env = parse_env(args.env, args.seed)
    if isinstance(env, TieredMemorySim):
        if args.solution != "sim":
            raise UsageError("sim environments use the 'sim' solution catalog")
        space = env.space
        env = SimCollectorEnv(env)
    else:
        space = get_space(args.solution, args.catalog)
    try:
        db = collect_database(env, space, period=args.period,
                              target_points=args.points, seed=args.seed)
    except CollectionError as e:
        partial_path = args.out + ".partial"
        save_database(partial_path, e.partial, seed=args.seed, period=args.period)
        print(f"collection failed: {e}; {len(e.partial)} points saved to {partial_path}",
              file=sys.stderr)
        return EXIT_ENVIRONMENT
    save_database(args.out, db, seed=args.seed, period=args.period)
    write_manifest(args.out, "collect", {"seed": args.seed},
                   {"database": os.path.abspath(args.out)}, args.catalog)
    print(f"collected {len(db)} points on {space.solution}: "
          f"ipc_min={db.ipc_min:.6f} ipc_max={db.ipc_max:.6f}")
    print(f"database written to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    db = load_database(args.db)
    if args.k != "auto":
        try:
            k = int(args.k)
        except ValueError:
            raise UsageError(f"--k must be 'auto' or an integer, got {args.k!r}")
    else:
        k = None
    cfg = ClusteringConfig(knn_k=args.knn_k, seed=args.seed)
    model, index = fit_cluster_model(db, cfg, k=k)
    save_model(args.out, model, index, cfg, db_path=os.path.abspath(args.db))
    write_manifest(args.out, "fit", {"seed": args.seed},
                   {"database": os.path.abspath(args.db),
                    "model": os.path.abspath(args.out)}, args.catalog)
    print(f"k={model.k} clusters over {len(db)} points (wcss={model.wcss:.6f})")
    for cid, (stats, entry) in enumerate(zip(model.stats, index.entries)):
        weights = ", ".join(f"{w:.3f}" for w in entry.weights)
        print(f"  cluster {cid}: size={len(entry.member_indices)} "
              f"mu={stats.mu:.4f} sigma={stats.sigma:.4f} T={stats.threshold:.4f} "
              f"weights=[{weights}]{' (uniform fallback)' if entry.weights_degraded else ''}")
    print(f"model written to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    db = load_database(args.db)
    model, index, knn_k = load_model(args.model, db)
    expert = build_expert_dataset(db, model, index, knn_k)
    policy = PolicyNet(db.space, seed=args.seed)
    final_ce = bc_pretrain(policy, expert, epochs=args.epochs, lr=args.lr,
                           seed=args.seed)
    from .rl import ValueNet
    value = ValueNet(seed=args.seed)
    save_weights(args.out_weights, policy, value)
    write_manifest(args.out_weights, "pretrain", {"seed": args.seed},
                   {"database": os.path.abspath(args.db),
                    "model": os.path.abspath(args.model),
                    "weights": os.path.abspath(args.out_weights)}, args.catalog)
    print(f"cloned {len(expert)} expert pairs over {args.epochs} epochs: "
          f"final cross-entropy {final_ce:.6f}")
    print(f"weights written to {args.out_weights}")
    return EXIT_OK


def cmd_tune(args) -> int:
    env = parse_env(args.env, args.seed)
    db_path = args.db or model_database_path(args.model)
    if db_path is None:
        raise artifacts.ArtifactError(
            f"{args.model} records no database path; pass --db explicitly")
    db = load_database(db_path)
    model, index, knn_k = load_model(args.model, db)
    policy, value = load_weights(args.weights, db.space)

    if isinstance(env, TieredMemorySim) and env.space.to_dict() != db.space.to_dict():
        raise artifacts.ArtifactError(
            "environment parameter space does not match the model artifacts")

    if args.backend == "sim":
        if not isinstance(env, TieredMemorySim):
            raise UsageError("--backend sim requires a sim environment")
        backend = SimBackend(env)
    elif args.backend == "sysfs-dryrun":
        backend = SysfsDryRunBackend()
    elif args.backend == "sysfs-live":
        backend = SysfsLiveBackend(acknowledged=args.i_know_this_writes_sysfs)
    else:
        raise UsageError(f"unknown backend {args.backend!r}")

    ppo_cfg = PPOConfig(seed=args.seed)
    agent = PPOAgent(db.space, ppo_cfg, policy=policy, value=value)
    tcfg = TunerConfig(tuning_period=args.period, knn_k=knn_k,
                       rl_online_learning=not args.freeze_rl)
    tuner = HybridTuner(db.space, model, index, agent, tcfg)

    baseline_env = parse_env(args.env, args.seed) if args.baseline else None
    report = run_loop(env, backend, tuner, args.duration, baseline_env=baseline_env)

    outputs = {"model": os.path.abspath(args.model),
               "weights": os.path.abspath(args.weights)}
    if args.report:
        report.save(args.report)
        outputs["report"] = os.path.abspath(args.report)
    if args.decision_log:
        report.save_decision_log(args.decision_log)
        outputs["decision_log"] = os.path.abspath(args.decision_log)
    if args.backend == "sysfs-dryrun" and args.write_list:
        backend.save_write_list(args.write_list)
        outputs["write_list"] = os.path.abspath(args.write_list)
    if args.report:
        write_manifest(args.report, "tune", {"seed": args.seed}, outputs, args.catalog)

    summary = report.to_dict()
    print(f"ran {summary['intervals']} intervals: mean ipc {summary['mean_ipc']:.6f} "
          f"(sources: {summary['sources']})")
    if report.speedup is not None:
        print(f"speedup vs default: {report.speedup:.4f}x "
              f"(baseline mean ipc {report.baseline_mean_ipc:.6f})")
    print(f"p99 decision latency: {summary['p99_latency_ms']:.3f} ms")
    return EXIT_OK


def cmd_sweep(args) -> int:
    kind, _, scenario = args.env.partition(":")
    if kind != "sim":
        raise UsageError("sweep requires a sim:<scenario> environment")
    if scenario not in SCENARIO_NAMES:
        raise SimError(f"unknown scenario {scenario!r}; choose from {SCENARIO_NAMES}")
    workload = make_scenario(scenario, args.seed)
    sim = TieredMemorySim(workload)
    try:
        sim.space.spec(args.param)
    except ValidationError:
        raise UsageError(f"unknown parameter {args.param!r} for the sim catalog")
    rows = param_sweep(workload, args.param)
    with open(args.out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("value", "ipc", "speedup_vs_default"))
        for row in rows:
            writer.writerow((row.value, f"{row.ipc:.6f}", f"{row.speedup:.6f}"))
    dat_path = os.path.splitext(args.out_csv)[0] + ".dat"
    with open(dat_path, "w") as f:
        f.write(f"# sweep of {args.param} on {scenario} (seed {args.seed})\n")
        f.write("# value ipc speedup_vs_default\n")
        for row in rows:
            f.write(f"{row.value} {row.ipc:.6f} {row.speedup:.6f}\n")
    for row in rows:
        print(f"{args.param}={row.value}: ipc={row.ipc:.6f} speedup={row.speedup:.4f}")
    print(f"sweep written to {args.out_csv} and {dat_path}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="tmtune",
                     description="hybrid offline+online tuner for tiered-memory knobs")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="build a performance database")
    p.add_argument("--env", required=True, help="sim:<scenario> or replay:<file>")
    p.add_argument("--solution", default="sim", help="catalog solution name")
    p.add_argument("--points", type=int, default=3000)
    p.add_argument("--period", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--catalog", default=None, help="catalog file override")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("fit", help="fit the clustering model on a database")
    p.add_argument("--db", required=True)
    p.add_argument("--k", default="auto", help="'auto' (elbow) or an integer")
    p.add_argument("--knn-k", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--catalog", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("pretrain", help="behavioral-cloning pretraining of the policy")
    p.add_argument("--db", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--catalog", default=None)
    p.add_argument("--out-weights", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("tune", help="run the hybrid online tuning loop")
    p.add_argument("--env", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--db", default=None,
                   help="database backing the model (defaults to the path recorded at fit time)")
    p.add_argument("--period", type=float, default=10.0)
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("--backend", choices=("sim", "sysfs-dryrun", "sysfs-live"),
                   default="sim")
    p.add_argument("--freeze-rl", action="store_true",
                   help="disable online PPO updates")
    p.add_argument("--baseline", action="store_true",
                   help="also run the default config for a speedup figure")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--catalog", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--decision-log", default=None)
    p.add_argument("--write-list", default=None,
                   help="CSV path for the dry-run write list")
    p.add_argument("--i-know-this-writes-sysfs", action="store_true")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("sweep", help="static single-knob sensitivity sweep")
    p.add_argument("--env", required=True, help="sim:<scenario>")
    p.add_argument("--param", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (artifacts.ArtifactError, CatalogError, ValidationError) as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (SimError, CollectionError, BackendError, NotImplementedError, OSError) as e:
        print(f"environment error: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT


if __name__ == "__main__":
    sys.exit(main())
