"""実験のコマンドラインドライバ

サブコマンド solve / regress / gtl / gtl0 / bounds / report を提供します。
すべての成果物は ``--out`` の下に書かれ、最後に manifest.json が作られます。
"""

import argparse
import dataclasses
import logging
import sys
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Final

import numpy as np
import pandas as pd

from guidedtraj._util import _canonical_json, _sha256_bytes
from guidedtraj.approximator import error_statistics
from guidedtraj.artifacts import (
    ArtifactStore,
    dumps_json,
    file_sha256,
    load_taskset,
    load_weights,
    read_json,
    run_log_frame,
    write_json,
)
from guidedtraj.bounds import (
    bounds_report,
    estimate_lipschitz,
    gumbel_curve,
    mc_cost_integral,
    violation_bound,
    violation_measured,
)
from guidedtraj.collocation import Trajectory, transcribe
from guidedtraj.config import ExperimentConfig
from guidedtraj.errors import CheckpointError, ConfigError, GuidedTrajError, StageError, TrendError
from guidedtraj.gtl import (
    AdmmState,
    GtlConfig,
    GuidedTrajectoryLearner,
    IterationMetrics,
    StoppingMode,
    convergence_check,
)
from guidedtraj.systems import SystemSpec
from guidedtraj.taskspace import TaskSet, covering_radius, sample_uniform

logger = logging.getLogger(__name__)

EXIT_OK: Final = 0
EXIT_ERROR: Final = 1
EXIT_CONFIG: Final = 2
EXIT_CHECKPOINT: Final = 3

FINAL_WEIGHTS: Final = "checkpoints/final/weights.bin"


def exit_code_for(e: GuidedTrajError) -> int:
    if isinstance(e, StageError) and isinstance(e.cause, GuidedTrajError):
        return exit_code_for(e.cause)
    if isinstance(e, ConfigError):
        return EXIT_CONFIG
    if isinstance(e, CheckpointError):
        return EXIT_CHECKPOINT
    return EXIT_ERROR


@contextmanager
def _stage(store: ArtifactStore, name: str) -> Iterator[None]:
    with store.stage(name):
        try:
            yield
        except (ConfigError, CheckpointError, StageError):
            raise
        except GuidedTrajError as e:
            raise StageError(name, e) from e


# 共通


def _learner(cfg: ExperimentConfig, spec: SystemSpec, gtl_cfg: GtlConfig | None = None) -> GuidedTrajectoryLearner:
    return GuidedTrajectoryLearner(
        spec,
        cfg.L_T,
        gtl_cfg or cfg.gtl,
        cfg.solver,
        cfg.train_config(),
        cfg.net_config(spec),
        weights_seed=cfg.seeds.weights,
        task_seed=cfg.seeds.tasks,
        workers=cfg.workers,
        thresholds=cfg.thresholds,
    )


def _task_sets(cfg: ExperimentConfig, spec: SystemSpec, store: ArtifactStore) -> tuple[TaskSet, TaskSet | None]:
    space = spec.task_space
    train = sample_uniform(space, cfg.n_tasks, cfg.seeds.tasks)
    store.save_taskset("tasks.csv", train)
    holdout = None
    if cfg.holdout_size > 0:
        holdout = sample_uniform(space, cfg.holdout_size, cfg.seeds.holdout)
        store.save_taskset("holdout.csv", holdout)
    store.set_meta(
        "holdout_split",
        {
            "n_train": len(train),
            "n_holdout": cfg.holdout_size,
            "seed_tasks": cfg.seeds.tasks,
            "seed_holdout": cfg.seeds.holdout,
        },
    )
    return train, holdout


def _error_rows(k: int, tasks: TaskSet, errors: np.ndarray, solved: Sequence[bool]) -> list[dict[str, Any]]:
    rows = []
    ok = [i for i, s in enumerate(solved) if s]
    for e, i in zip(errors, ok):
        row: dict[str, Any] = {"k": k, "task_index": i}
        row.update({f"tau_{j}": c for j, c in enumerate(tasks[i].coords)})
        row["error"] = float(e)
        rows.append(row)
    return rows


def _stats_row(k: int, errors: np.ndarray, thresholds: Sequence[float]) -> dict[str, Any]:
    return {"k": k, **error_statistics(errors, thresholds).to_row()}


# サブコマンド


def cmd_solve(cfg: ExperimentConfig, store: ArtifactStore) -> dict[str, Any]:
    """タスクを一様に生成し、それぞれの軌道最適化を解いて軌道CSVと実行ログを書きます。"""
    spec = cfg.build_system()
    with _stage(store, "solve"):
        tasks = sample_uniform(spec.task_space, cfg.n_tasks, cfg.seeds.tasks)
        store.save_taskset("tasks.csv", tasks)
        reports = _learner(cfg, spec).solve_original(tasks)
        for i, (task, r) in enumerate(zip(tasks, reports)):
            traj = transcribe(spec, task, cfg.L_T).trajectory(r.solution)
            store.save_trajectory(f"trajectories/task_{i:04d}.csv", traj, task, r.status.value)
        store.write_csv("run_log.csv", run_log_frame(reports, cfg.solver))
    n_ok = sum(bool(r) for r in reports)
    return {"n_tasks": len(tasks), "n_converged": n_ok}


def cmd_regress(cfg: ExperimentConfig, store: ArtifactStore) -> dict[str, Any]:
    """元の解への標準的な回帰と、評価用タスクでの誤差"""
    spec = cfg.build_system()
    learner = _learner(cfg, spec)
    train, holdout = _task_sets(cfg, spec, store)
    with _stage(store, "regression"):
        state = learner.init(train)
        m = learner.metrics(state)
        store.save_weights("checkpoints/iter_000/weights.bin", state.weights)
        store.save_weights(FINAL_WEIGHTS, state.weights)
    row = m.to_row()
    summary: dict[str, Any] = {"train": _stats_row(0, m.errors, cfg.thresholds)}
    if holdout is not None:
        with _stage(store, "holdout"):
            res = learner.evaluate_holdout(state, holdout)
        row.update(_test_columns(res.errors, cfg.thresholds))
        store.write_csv("holdout_errors.csv", pd.DataFrame(_error_rows(0, holdout, res.errors, res.solved)))
        summary["holdout"] = _stats_row(0, res.errors, cfg.thresholds)
    store.write_csv("metrics.csv", pd.DataFrame([row]))
    store.write_csv("train_errors.csv", pd.DataFrame(_error_rows(0, train, m.errors, state.solved)))
    return summary


def _test_columns(errors: np.ndarray, thresholds: Sequence[float]) -> dict[str, float]:
    if errors.size == 0:
        return {}
    return {
        "test_mean_ninf": float(errors.mean()),
        "test_max_ninf": float(errors.max()),
        "test_frac_gt_thresh1": float(np.mean(errors > thresholds[0])),
        "test_frac_gt_thresh2": float(np.mean(errors > thresholds[1])),
    }


def cmd_gtl(cfg: ExperimentConfig, store: ArtifactStore, mode: str) -> dict[str, Any]:
    """GTLまたはGTL-0を実行し、反復ごとの指標、チェックポイント、連続性の調査を書きます。"""
    gtl_cfg = cfg.gtl
    if mode == "gtl0":
        stopping = gtl_cfg.stopping_mode
        if stopping is StoppingMode.MULTIPLIER_DELTA:
            stopping = StoppingMode.RECON_ERROR_DELTA
        gtl_cfg = dataclasses.replace(gtl_cfg, alpha=0.0, stopping_mode=stopping)
    elif gtl_cfg.alpha <= 0.0:
        raise ConfigError("mode gtl requires gtl.alpha > 0; use gtl0 for the penalty method")
    spec = cfg.build_system()
    learner = _learner(cfg, spec, gtl_cfg)
    regime = convergence_check(gtl_cfg)
    train, holdout = _task_sets(cfg, spec, store)

    rows: list[dict[str, Any]] = []
    train_rows: list[dict[str, Any]] = []
    test_rows: list[dict[str, Any]] = []
    stats: list[dict[str, Any]] = []
    previous: list[Trajectory | None] | None = None

    def on_iteration(state: AdmmState, m: IterationMetrics) -> None:
        nonlocal previous
        store.save_weights(f"checkpoints/iter_{m.k:03d}/weights.bin", state.weights)
        row = m.to_row()
        train_rows.extend(_error_rows(m.k, state.tasks, m.errors, state.solved))
        if holdout is not None:
            res = learner.evaluate_holdout(state, holdout, previous)
            previous = list(res.trajectories)
            row.update(_test_columns(res.errors, cfg.thresholds))
            test_rows.extend(_error_rows(m.k, holdout, res.errors, res.solved))
            if res.errors.size:
                stats.append(_stats_row(m.k, res.errors, cfg.thresholds))
        rows.append(row)

    with _stage(store, mode):
        result = learner.run(train, on_iteration)
        store.save_weights(FINAL_WEIGHTS, result.state.weights)
    violations = result.trend_violations
    store.set_meta("trend", {"monotone": not violations, "violations": violations})
    store.write_csv("metrics.csv", pd.DataFrame(rows))
    store.write_csv("train_errors.csv", pd.DataFrame(train_rows))
    if test_rows:
        store.write_csv("holdout_errors.csv", pd.DataFrame(test_rows))

    with _stage(store, "continuity"):
        study = learner.continuity_study(
            result.state, cfg.continuity.n_points, cfg.continuity.coord, cfg.continuity.node_fraction
        )
    store.write_csv(
        "continuity.csv",
        pd.DataFrame({"tau": study.tau, "original": study.original, "guided": study.guided, "prediction": study.prediction}),
    )
    return {
        "mode": mode,
        "status": result.status.value,
        "iterations": result.state.iteration,
        "trend_violations": violations,
        "require_monotone_trend": gtl_cfg.require_monotone_trend,
        "convergence_regime": regime.regime.value,
        "convergence_message": regime.message,
        "holdout_statistics": stats,
        "continuity": {
            "node": study.node,
            "max_jump_original": study.max_jump("original"),
            "max_jump_guided": study.max_jump("guided"),
            "max_jump_prediction": study.max_jump("prediction"),
        },
    }


def cmd_bounds(
    cfg: ExperimentConfig, store: ArtifactStore, weights_path: str | None, eps: float | None
) -> dict[str, Any]:
    """重みのチェックポイントから制約違反の上界と実測値を求めます。"""
    path = Path(weights_path) if weights_path is not None else store.path(FINAL_WEIGHTS)
    weights = load_weights(path)
    spec = cfg.build_system()
    net = cfg.net_config(spec)
    if (weights.config.seq_len, weights.config.state_dim, weights.config.task_dim) != (
        net.seq_len,
        net.state_dim,
        net.task_dim,
    ):
        raise ConfigError(f"checkpoint {path} does not match the configured system and L_T")
    space = spec.task_space
    bcfg = cfg.bounds
    with _stage(store, "bounds"):
        train = sample_uniform(space, cfg.n_tasks, cfg.seeds.tasks)
        eps_N = covering_radius(train) if len(train) >= 2 else 0.0
        eps_used = eps if eps is not None else (bcfg.eps if bcfg.eps is not None else eps_N)
        if eps_used < 0.0:
            raise ConfigError(f"--eps must be >= 0, got {eps_used}")
        probe = dataclasses.replace(bcfg.probe, local_eps=eps_used if bcfg.local else bcfg.probe.local_eps)
        lip = estimate_lipschitz(weights, space, probe, spec, cfg.L_T)
        bound = violation_bound(lip, eps_used, bcfg.local)
        measured = violation_measured(weights, spec, space, bcfg.grid_n, cfg.L_T)
        curve = gumbel_curve(space, bcfg.gumbel_ns, bcfg.gumbel_replicates, cfg.seeds.tasks)
        mc = mc_cost_integral(weights, space, bcfg.mc_samples, cfg.seeds.holdout, spec, cfg.L_T)
    report = bounds_report(
        lip,
        bound,
        measured,
        bcfg.slack,
        atol=cfg.solver.feas_tol,
        covering_radius=eps_N,
        lipschitz=lip.to_dict(),
        mc_cost={"integral": mc.integral, "variance": mc.variance, "n": mc.n},
        gumbel_curve=curve.to_dict(orient="records"),
        weights_sha256=file_sha256(path),
    )
    store.write_json("bounds.json", report)
    store.write_csv("violation_profile.csv", measured.frame())
    store.write_csv("gumbel.csv", curve)
    return {"dominated": report["dominated"], "eps": eps_used}


def cmd_report(store: ArtifactStore, restrict: float) -> dict[str, Any]:
    """評価誤差を反復ごとに集計します。restrict < 1ならタスク範囲の中央部分だけを使います。"""
    errors_path = store.path("holdout_errors.csv")
    if not errors_path.is_file():
        errors_path = store.path("train_errors.csv")
    if not errors_path.is_file():
        raise CheckpointError(f"no error tables found under {store.root}")
    frame = pd.read_csv(errors_path)
    thresholds = _thresholds_from(store)
    if restrict < 1.0:
        ts = load_taskset(store.path("holdout.csv" if errors_path.name.startswith("holdout") else "tasks.csv"))
        sub = ts.space.shrink(restrict)
        tau = frame[[c for c in frame.columns if c.startswith("tau_")]].to_numpy(dtype=np.float64)
        keep = np.all((tau >= sub.lower_array) & (tau <= sub.upper_array), axis=1)
        frame = frame[keep]
    rows = [_stats_row(int(k), g["error"].to_numpy(), thresholds) for k, g in frame.groupby("k", sort=True)]
    table = pd.DataFrame(rows)
    store.write_csv("report.csv", table)
    store.write_json("report.json", {"source": errors_path.name, "restrict": restrict, "iterations": rows})
    return {"rows": len(rows), "restrict": restrict}


def _thresholds_from(store: ArtifactStore) -> tuple[float, float]:
    path = store.path("summary.json")
    if path.is_file():
        th = read_json(path).get("thresholds")
        if th:
            return (float(th[0]), float(th[1]))
    return (0.01, 0.015)


# 引数とエントリポイント


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guidedtraj", description="Guided trajectory learning experiments")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
        p.add_argument("--config", required=needs_config, help="YAML experiment config")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="base seed; derives task/holdout/weights/training seeds")
        p.add_argument("--workers", type=int, help="worker processes for batch solves")

    for name, help_text in (
        ("solve", "solve sampled tasks and export trajectories"),
        ("regress", "standard regression baseline"),
        ("gtl", "guided trajectory learning (alpha > 0)"),
        ("gtl0", "guided trajectory learning with alpha = 0"),
    ):
        common(sub.add_parser(name, help=help_text))
    p = sub.add_parser("bounds", help="constraint-violation bounds for a weights checkpoint")
    common(p)
    p.add_argument("--weights", help=f"weights checkpoint (default <out>/{FINAL_WEIGHTS})")
    p.add_argument("--eps", type=float, help="override the covering radius")
    p = sub.add_parser("report", help="tabulate error statistics of an output directory")
    common(p, needs_config=False)
    p.add_argument("--restrict", type=float, default=1.0, help="central fraction of the task range to keep")
    return parser


def _configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level), format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _emit_error(e: GuidedTrajError, out: str | None) -> int:
    payload = e.to_dict()
    payload["exit_code"] = exit_code_for(e)
    sys.stderr.write(dumps_json(payload))
    if out is not None:
        try:
            write_json(Path(out) / "error.json", payload)
        except OSError:
            logger.warning("could not write error.json under %s", out)
    logger.error("%s: %s", e.kind, e)
    return payload["exit_code"]


def _run(args: argparse.Namespace) -> tuple[ArtifactStore, dict[str, Any]]:
    if args.command == "report":
        store = ArtifactStore(args.out or "out")
        if not 0.0 < args.restrict <= 1.0:
            raise ConfigError(f"--restrict must be in (0, 1], got {args.restrict}")
        summary = cmd_report(store, args.restrict)
        store.write_manifest(_sha256_bytes(b""), _inputs_hash(args, ""))
        return store, summary

    cfg = ExperimentConfig.load(args.config).with_overrides(args.seed, args.workers, args.out)
    store = ArtifactStore(cfg.output_dir)
    commands: dict[str, Callable[[], dict[str, Any]]] = {
        "solve": lambda: cmd_solve(cfg, store),
        "regress": lambda: cmd_regress(cfg, store),
        "gtl": lambda: cmd_gtl(cfg, store, "gtl"),
        "gtl0": lambda: cmd_gtl(cfg, store, "gtl0"),
        "bounds": lambda: cmd_bounds(cfg, store, args.weights, args.eps),
    }
    summary = commands[args.command]()
    summary = {"command": args.command, "config_hash": cfg.config_hash(), "thresholds": list(cfg.thresholds), **summary}
    store.write_json("summary.json", summary)
    store.set_meta("tolerances", {"feas_tol": cfg.solver.feas_tol, "opt_tol": cfg.solver.opt_tol})
    store.write_manifest(cfg.config_hash(), _inputs_hash(args, cfg.config_hash()))
    violations = summary.get("trend_violations")
    if violations and summary.get("require_monotone_trend", True):
        # 成果物とマニフェストは残したうえで失敗として終了する
        raise TrendError(violations)
    return store, summary


def _inputs_hash(args: argparse.Namespace, config_hash: str) -> str:
    inputs: dict[str, Any] = {"command": args.command, "config_hash": config_hash}
    for key in ("eps", "restrict"):
        if getattr(args, key, None) is not None:
            inputs[key] = getattr(args, key)
    weights = getattr(args, "weights", None)
    if weights is not None and Path(weights).is_file():
        inputs["weights"] = file_sha256(weights)
    return _sha256_bytes(_canonical_json(inputs).encode())


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_level)
    try:
        _, summary = _run(args)
    except GuidedTrajError as e:
        out = args.out
        if out is None and getattr(args, "config", None):
            cfg, _ = ExperimentConfig.load_nothrow(args.config)
            out = cfg.output_dir if cfg is not None else None
        return _emit_error(e, out)
    logger.info("%s finished: %s", args.command, _canonical_json(summary)[:200])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
