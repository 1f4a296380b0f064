"""合意ADMMによるGuided Trajectory Learningの調整役

各反復で、タスクごとの近接項付き軌道最適化、乗数でずらした目標への回帰、
乗数の更新を順に行います。α = 0 のときは乗数が0のままのペナルティ法(GTL-0)になります。
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any, Final

import numpy as np

from guidedtraj.approximator import (
    DEFAULT_THRESHOLDS,
    ApproximatorWeights,
    NetConfig,
    RegressionTarget,
    TrainConfig,
    consensus_points,
    fit,
    init_weights,
)
from guidedtraj.collocation import CollocationNlp, ProximalTerm, Trajectory, transcribe
from guidedtraj.errors import ConfigError, DimensionError, GuidedTrajError, TrendError
from guidedtraj.nlpsolver import SolveReport, SolverConfig, solve_multistart_batch
from guidedtraj.systems import SystemSpec
from guidedtraj.taskspace import Task, TaskSet, resample_seed, sample_uniform

logger = logging.getLogger(__name__)

CONTINUITY_NODE_FRACTION: Final = 0.2


class StoppingMode(StrEnum):
    MULTIPLIER_DELTA = "multiplier_delta"
    RECON_ERROR_DELTA = "recon_error_delta"


class RunStatus(StrEnum):
    CRITERION = "criterion"
    BUDGET = "budget"


@dataclass(frozen=True)
class RhoSchedule:
    """ρ^k = min(initial·growth^k, maximum)"""

    initial: float = 5.0
    growth: float = 1.0
    maximum: float = math.inf

    def __post_init__(self) -> None:
        if self.initial < 0.0:
            raise ConfigError(f"rho initial value must be >= 0, got {self.initial}")
        if self.growth < 1.0:
            raise ConfigError(f"rho growth must be >= 1 so that rho is nondecreasing, got {self.growth}")
        if self.maximum < self.initial:
            raise ConfigError("rho maximum must not be below the initial value")

    def at(self, k: int) -> float:
        if self.growth == 1.0:
            return self.initial
        return min(self.initial * self.growth**k, self.maximum)

    @property
    def unbounded(self) -> bool:
        return self.growth > 1.0 and self.initial > 0.0 and math.isinf(self.maximum)

    @property
    def limit(self) -> float:
        if self.growth == 1.0 or self.initial == 0.0:
            return self.initial
        return self.maximum


@dataclass(frozen=True)
class GtlConfig:
    n_tasks: int = 200
    gamma: float = 1.0
    rho: RhoSchedule = field(default_factory=RhoSchedule)
    alpha: float = 0.0
    max_iterations: int = 2
    stopping_mode: StoppingMode = StoppingMode.RECON_ERROR_DELTA
    stopping_tol: float = 1e-6
    resample_each_iter: bool = False
    # 回帰の目的関数の勾配のLipschitz定数の見積もり。収束条件の判定にだけ使います
    lipschitz_L: float = 1.0
    # 反復0の誤差を上回る反復があれば実行を失敗として扱う
    require_monotone_trend: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.rho, dict):
            object.__setattr__(self, "rho", RhoSchedule(**self.rho))
        elif isinstance(self.rho, int | float):
            object.__setattr__(self, "rho", RhoSchedule(initial=float(self.rho)))
        try:
            object.__setattr__(self, "stopping_mode", StoppingMode(self.stopping_mode))
        except ValueError:
            raise ConfigError(f"unknown stopping mode {self.stopping_mode!r}") from None
        if self.n_tasks < 1:
            raise ConfigError(f"n_tasks must be >= 1, got {self.n_tasks}")
        if self.gamma <= 0.0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.max_iterations < 0 or self.stopping_tol < 0.0 or self.lipschitz_L < 0.0:
            raise ConfigError("max_iterations, stopping_tol and lipschitz_L must be >= 0")
        if self.stopping_mode is StoppingMode.MULTIPLIER_DELTA and self.alpha == 0.0:
            raise ConfigError("stopping mode multiplier_delta requires alpha > 0")
        if self.resample_each_iter and self.alpha != 0.0:
            raise ConfigError("resample_each_iter is only available with alpha = 0")


@dataclass(frozen=True)
class AdmmState:
    """1反復を終えた時点の不変なスナップショット"""

    iteration: int
    tasks: TaskSet
    trajectories: tuple[Trajectory, ...]
    solved: tuple[bool, ...]
    consensus: np.ndarray
    multipliers: np.ndarray
    weights: ApproximatorWeights
    rho: float
    alpha: float
    gamma: float
    resample_each_iter: bool = False

    def __post_init__(self) -> None:
        n = len(self.tasks)
        if len(self.trajectories) != n or len(self.solved) != n:
            raise DimensionError("trajectories and solved flags must align with the task set")
        if self.consensus.shape != self.multipliers.shape or self.consensus.shape[0] != n:
            raise DimensionError("consensus points and multipliers must be (N, L_T*p + 1)")
        for a in (self.consensus, self.multipliers):
            a.setflags(write=False)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def solved_indices(self) -> np.ndarray:
        return np.flatnonzero(np.array(self.solved, dtype=bool))

    def trajectory_consensus(self) -> np.ndarray:
        """Y_i = (X_i, γT_i)"""
        return np.stack([t.consensus_vector(self.gamma) for t in self.trajectories])

    def residuals(self) -> np.ndarray:
        return self.trajectory_consensus() - self.consensus


@dataclass(frozen=True)
class IterationMetrics:
    k: int
    rho: float
    mean_ninf: float
    max_ninf: float
    frac_gt_thresh1: float
    frac_gt_thresh2: float
    mean_cost: float
    multiplier_norm: float
    recon_error: float
    mean_ninf_sq: float
    mean_duration_error: float
    augmented_lagrangian: float
    n_solved: int
    errors: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def to_row(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "rho": self.rho,
            "mean_ninf": self.mean_ninf,
            "max_ninf": self.max_ninf,
            "frac_gt_thresh1": self.frac_gt_thresh1,
            "frac_gt_thresh2": self.frac_gt_thresh2,
            "mean_cost": self.mean_cost,
            "multiplier_norm": self.multiplier_norm,
            "recon_error": self.recon_error,
            "mean_ninf_sq": self.mean_ninf_sq,
            "mean_duration_error": self.mean_duration_error,
            "augmented_lagrangian": self.augmented_lagrangian,
            "n_solved": self.n_solved,
        }


@dataclass(frozen=True)
class RunResult:
    state: AdmmState
    metrics: tuple[IterationMetrics, ...]
    status: RunStatus

    @property
    def trend_violations(self) -> list[int]:
        return monotone_trend_violations(self.metrics)

    def check_trend(self) -> "RunResult":
        """平均norm-inf誤差が反復0を上回った反復があればTrendErrorを送出します。"""
        bad = self.trend_violations
        if bad:
            raise TrendError(bad)
        return self


def monotone_trend_violations(history: Sequence[IterationMetrics]) -> list[int]:
    """平均norm-inf誤差が反復0の値を上回った反復番号"""
    if not history:
        return []
    base = history[0].mean_ninf
    return [m.k for m in history[1:] if m.mean_ninf > base]


def stopping_decrease(history: Sequence[IterationMetrics]) -> float:
    """E(k−1) − E(k)。Eは平均norm-inf誤差の2乗で、増えたときは負になります。"""
    if len(history) < 2:
        raise ValueError("stopping decrease needs at least two iterations")
    return history[-2].mean_ninf_sq - history[-1].mean_ninf_sq


@dataclass(frozen=True)
class HoldoutResult:
    errors: np.ndarray
    trajectories: tuple[Trajectory, ...]
    solved: tuple[bool, ...]


@dataclass(frozen=True)
class ContinuityStudy:
    """あるノードの状態成分を、1つのタスク座標を掃引して記録したもの"""

    tau: np.ndarray
    original: np.ndarray
    guided: np.ndarray
    prediction: np.ndarray
    node: int

    def max_jump(self, name: str) -> float:
        return float(np.abs(np.diff(getattr(self, name))).max(initial=0.0))


class ConvergenceRegime(StrEnum):
    DUAL_STEP_RHO_ABOVE_L = "alpha_in_(0,1]_rho_above_L"
    PENALTY_RHO_UNBOUNDED = "alpha_zero_rho_unbounded"
    NONE = "none"


@dataclass(frozen=True)
class ConvergenceReport:
    regime: ConvergenceRegime
    rho_nondecreasing: bool
    rho_unbounded: bool
    first_k_above_L: int | None
    message: str

    def __bool__(self) -> bool:
        return self.regime is not ConvergenceRegime.NONE


def convergence_check(cfg: GtlConfig, lipschitz_L: float | None = None, horizon: int = 100) -> ConvergenceReport:
    """ρの列と双対ステップαが収束条件のどちらを満たすかを調べます。助言のみで、実行は止めません。"""
    if lipschitz_L is None:
        lipschitz_L = cfg.lipschitz_L
    sched = cfg.rho
    first = next((k for k in range(horizon + 1) if sched.at(k) > lipschitz_L), None)
    if 0.0 < cfg.alpha <= 1.0 and sched.limit > lipschitz_L:
        regime = ConvergenceRegime.DUAL_STEP_RHO_ABOVE_L
        msg = f"0 < alpha <= 1 and rho^k > L = {lipschitz_L:g} from k = {first}"
    elif cfg.alpha == 0.0 and sched.unbounded:
        regime = ConvergenceRegime.PENALTY_RHO_UNBOUNDED
        msg = "alpha = 0 with rho^k -> infinity"
    else:
        regime = ConvergenceRegime.NONE
        msg = (
            f"no convergence regime holds (alpha = {cfg.alpha:g}, rho limit = {sched.limit:g}, L = {lipschitz_L:g}); "
            "a nonzero reconstruction floor is expected"
        )
        logger.warning(msg)
    return ConvergenceReport(regime, True, sched.unbounded, first, msg)


def plateau_detected(values: Sequence[float], rel_tol: float = 0.1, window: int = 3) -> bool:
    """直近window回の変化がすべて現在値のrel_tol倍未満で、値が0でなければ真"""
    v = list(values)
    if len(v) < window + 1:
        return False
    tail = v[-(window + 1) :]
    return tail[-1] > 0.0 and all(abs(b - a) < rel_tol * abs(b) for a, b in zip(tail, tail[1:]))


class GuidedTrajectoryLearner:
    """系・離散化・ソルバー・学習の設定を保持してADMMを回します。"""

    __slots__ = (
        "__spec",
        "__L_T",
        "__cfg",
        "__solver_cfg",
        "__train_cfg",
        "__net_cfg",
        "__weights_seed",
        "__task_seed",
        "__workers",
        "__thresholds",
    )
    __spec: SystemSpec
    __L_T: int
    __cfg: GtlConfig
    __solver_cfg: SolverConfig
    __train_cfg: TrainConfig
    __net_cfg: NetConfig
    __weights_seed: int
    __task_seed: int
    __workers: int
    __thresholds: tuple[float, float]

    def __init__(
        self,
        spec: SystemSpec,
        L_T: int,
        cfg: GtlConfig,
        solver_cfg: SolverConfig,
        train_cfg: TrainConfig,
        net_cfg: NetConfig,
        weights_seed: int = 0,
        task_seed: int = 0,
        workers: int = 1,
        thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    ) -> None:
        if net_cfg.seq_len != L_T or net_cfg.state_dim != spec.state_dim or net_cfg.task_dim != spec.task_space.dims:
            raise ConfigError(
                f"network shape (L_T={net_cfg.seq_len}, p={net_cfg.state_dim}, m={net_cfg.task_dim}) "
                f"does not match the problem (L_T={L_T}, p={spec.state_dim}, m={spec.task_space.dims})"
            )
        if len(thresholds) != 2:
            raise ConfigError("exactly two exceedance thresholds are required")
        self.__spec = spec
        self.__L_T = L_T
        self.__cfg = cfg
        self.__solver_cfg = solver_cfg
        self.__train_cfg = train_cfg
        self.__net_cfg = net_cfg
        self.__weights_seed = weights_seed
        self.__task_seed = task_seed
        self.__workers = workers
        self.__thresholds = (float(thresholds[0]), float(thresholds[1]))

    @property
    def spec(self) -> SystemSpec:
        return self.__spec

    @property
    def config(self) -> GtlConfig:
        return self.__cfg

    @property
    def L_T(self) -> int:
        return self.__L_T

    # 求解

    def _seed_starts(self, nlp: CollocationNlp) -> list[np.ndarray]:
        s = self.__spec
        raws = s.basin_seeds(nlp.task, self.__L_T) if s.multi_basin else [s.initial_guess(nlp.task, self.__L_T)]
        return [nlp.initial_point(r) for r in raws]

    def _prediction_start(self, nlp: CollocationNlp, z: np.ndarray, previous: Trajectory | None) -> np.ndarray:
        p = self.__spec.state_dim
        X = z[:-1].reshape(self.__L_T, p)
        U = previous.controls if previous is not None else np.zeros((self.__L_T, self.__spec.control_dim))
        return nlp.project(Trajectory(X, U, z[-1] / self.__cfg.gamma).to_vector())

    def solve_original(self, tasks: TaskSet) -> list[SolveReport]:
        """近接項なしの軌道最適化。多峰の系では局所解ごとの初期値から解きます。"""
        nlps = [transcribe(self.__spec, t, self.__L_T) for t in tasks]
        starts = [self._seed_starts(n) for n in nlps]
        return solve_multistart_batch(nlps, starts, self.__solver_cfg, self.__workers)

    def solve_guided(
        self,
        tasks: TaskSet,
        consensus: np.ndarray,
        multipliers: np.ndarray,
        rho: float,
        previous: Sequence[Trajectory | None],
    ) -> list[SolveReport]:
        """近接項付きの問題。前回の解と予測の両方から始め、目的関数の小さい方を採ります。"""
        nlps: list[CollocationNlp] = []
        starts: list[list[np.ndarray]] = []
        for i, task in enumerate(tasks):
            prox = ProximalTerm(consensus[i], multipliers[i], rho, self.__cfg.gamma)
            nlp = transcribe(self.__spec, task, self.__L_T, prox)
            s = [self._prediction_start(nlp, consensus[i], previous[i])]
            if previous[i] is not None:
                s.insert(0, nlp.initial_point(previous[i]))
            nlps.append(nlp)
            starts.append(s)
        return solve_multistart_batch(nlps, starts, self.__solver_cfg, self.__workers)

    def _train(self, w0: ApproximatorWeights, state_targets: list[RegressionTarget], tasks: TaskSet) -> ApproximatorWeights:
        return fit(w0, state_targets, tasks, self.__train_cfg).weights

    # ADMM

    def init(self, tasks: TaskSet) -> AdmmState:
        """元の問題を解き、標準的な回帰でW⁰を求めます。反復0は回帰のみの基準と同じです。"""
        reports = self.solve_original(tasks)
        trajs = tuple(transcribe(self.__spec, t, self.__L_T).trajectory(r.solution) for t, r in zip(tasks, reports))
        solved = tuple(bool(r) for r in reports)
        idx = [i for i, ok in enumerate(solved) if ok]
        if not idx:
            raise GuidedTrajError("no task could be solved during initialization")
        if len(idx) < len(tasks):
            logger.warning("init: %d of %d tasks unsolved and excluded from regression", len(tasks) - len(idx), len(tasks))
        gamma = self.__cfg.gamma
        targets = [RegressionTarget(trajs[i].states, trajs[i].duration, gamma) for i in idx]
        w0 = init_weights(self.__net_cfg, self.__weights_seed)
        weights = self._train(w0, targets, tasks.select(idx))
        Z = consensus_points(weights, tasks, gamma)
        return AdmmState(
            iteration=0,
            tasks=tasks,
            trajectories=trajs,
            solved=solved,
            consensus=Z,
            multipliers=np.zeros_like(Z),
            weights=weights,
            rho=self.__cfg.rho.at(0),
            alpha=self.__cfg.alpha,
            gamma=gamma,
            resample_each_iter=self.__cfg.resample_each_iter,
        )

    def admm_iterate(self, state: AdmmState) -> AdmmState:
        k = state.iteration
        gamma = state.gamma
        if state.resample_each_iter:
            tasks = sample_uniform(state.tasks.space, state.n_tasks, resample_seed(self.__task_seed, k + 1))
            Z = consensus_points(state.weights, tasks, gamma)
            Lam = np.zeros_like(Z)
            previous: list[Trajectory | None] = [None] * len(tasks)
            prev_trajs: tuple[Trajectory | None, ...] = tuple(previous)
        else:
            tasks = state.tasks
            Z = np.array(state.consensus)
            Lam = np.array(state.multipliers)
            previous = list(state.trajectories)
            prev_trajs = state.trajectories

        reports = self.solve_guided(tasks, Z, Lam, state.rho, previous)
        new_trajs: list[Trajectory] = []
        solved: list[bool] = []
        for i, (task, r) in enumerate(zip(tasks, reports)):
            traj = transcribe(self.__spec, task, self.__L_T).trajectory(r.solution)
            if r or prev_trajs[i] is None:
                new_trajs.append(traj)
            else:
                new_trajs.append(prev_trajs[i])  # type: ignore[arg-type]
            solved.append(bool(r))
        idx = [i for i, ok in enumerate(solved) if ok]
        if not idx:
            raise GuidedTrajError(f"iteration {k + 1}: no task could be solved")
        if len(idx) < len(tasks):
            logger.warning("iteration %d: %d tasks unsolved and excluded", k + 1, len(tasks) - len(idx))

        p = self.__spec.state_dim
        targets = []
        for i in idx:
            lam_x = Lam[i, :-1].reshape(self.__L_T, p)
            lam_t = Lam[i, -1] / gamma
            targets.append(RegressionTarget(new_trajs[i].states + lam_x, new_trajs[i].duration + lam_t, gamma))
        weights = self._train(state.weights, targets, tasks.select(idx))
        Z_new = consensus_points(weights, tasks, gamma)
        Y = np.stack([t.consensus_vector(gamma) for t in new_trajs])
        Lam_new = Lam.copy()
        Lam_new[idx] = Lam[idx] + state.alpha * (Y[idx] - Z_new[idx])
        return AdmmState(
            iteration=k + 1,
            tasks=tasks,
            trajectories=tuple(new_trajs),
            solved=tuple(solved),
            consensus=Z_new,
            multipliers=Lam_new,
            weights=weights,
            rho=self.__cfg.rho.at(k + 1),
            alpha=state.alpha,
            gamma=gamma,
            resample_each_iter=state.resample_each_iter,
        )

    # 評価

    def task_costs(self, state: AdmmState) -> np.ndarray:
        return np.array(
            [
                transcribe(self.__spec, task, self.__L_T).cost(traj.to_vector())
                for task, traj in zip(state.tasks, state.trajectories)
            ]
        )

    def augmented_lagrangian(self, state: AdmmState) -> float:
        """L_ρ = (1/N) Σ L_i + (ρ/2) Σ ‖(X_i, γT_i) − Z_i + Λ_i‖²(解けたタスクのみ)"""
        idx = state.solved_indices
        r = state.residuals()[idx] + state.multipliers[idx]
        return float(self.task_costs(state)[idx].mean()) + 0.5 * state.rho * float((r**2).sum())

    def subproblem_objective(self, state: AdmmState) -> float:
        """各タスクの近接項付き目的関数の和"""
        total = 0.0
        for i in state.solved_indices:
            prox = ProximalTerm(state.consensus[i], state.multipliers[i], state.rho, state.gamma)
            nlp = transcribe(self.__spec, state.tasks[i], self.__L_T, prox)
            total += nlp.objective(state.trajectories[i].to_vector())
        return total

    def penalty_objective(self, state: AdmmState) -> float:
        """Σ L_i + (ρ/2) ‖Y − Z‖²。α = 0 では近接項付き目的関数の和と一致します。"""
        idx = state.solved_indices
        r = state.residuals()[idx]
        return float(self.task_costs(state)[idx].sum()) + 0.5 * state.rho * float((r**2).sum())

    def metrics(self, state: AdmmState) -> IterationMetrics:
        idx = state.solved_indices
        p = self.__spec.state_dim
        X = np.stack([state.trajectories[i].states for i in idx])
        T = np.array([state.trajectories[i].duration for i in idx])
        Xh = state.consensus[idx, :-1].reshape(len(idx), self.__L_T, p)
        Th = state.consensus[idx, -1] / state.gamma
        errors = np.abs(X - Xh).reshape(len(idx), -1).max(axis=1)
        t1, t2 = self.__thresholds
        return IterationMetrics(
            k=state.iteration,
            rho=state.rho,
            mean_ninf=float(errors.mean()),
            max_ninf=float(errors.max()),
            frac_gt_thresh1=float(np.mean(errors > t1)),
            frac_gt_thresh2=float(np.mean(errors > t2)),
            mean_cost=float(self.task_costs(state)[idx].mean()),
            multiplier_norm=float(np.linalg.norm(state.multipliers)),
            recon_error=float(((X - Xh) ** 2).sum() + state.gamma * ((T - Th) ** 2).sum()),
            mean_ninf_sq=float((errors**2).mean()),
            mean_duration_error=float(np.abs(T - Th).mean()),
            augmented_lagrangian=self.augmented_lagrangian(state),
            n_solved=len(idx),
            errors=errors,
        )

    def run(
        self,
        tasks: TaskSet,
        on_iteration: Callable[[AdmmState, IterationMetrics], None] | None = None,
    ) -> RunResult:
        """停止条件か反復上限まで回します。

        recon_error_delta では平均norm-inf誤差の2乗の減少量 E(k−1) − E(k) が
        stopping_tol 以下になったら止めます。誤差が増えた反復でも止まります。
        誤差が反復0を上回った反復は RunResult.trend_violations に残るので、
        require_monotone_trend のときは呼び出し側で check_trend() を呼んでください。
        """
        cfg = self.__cfg
        state = self.init(tasks)
        history = [self.metrics(state)]
        logger.info("iter 0 (regression): mean ninf %.4e max %.4e", history[0].mean_ninf, history[0].max_ninf)
        if on_iteration is not None:
            on_iteration(state, history[0])
        status = RunStatus.BUDGET
        for _ in range(cfg.max_iterations):
            new_state = self.admm_iterate(state)
            m = self.metrics(new_state)
            history.append(m)
            logger.info(
                "iter %d: rho %.3g mean ninf %.4e max %.4e |Lambda| %.3e",
                m.k,
                m.rho,
                m.mean_ninf,
                m.max_ninf,
                m.multiplier_norm,
            )
            if m.mean_ninf > history[0].mean_ninf:
                logger.warning("iter %d: mean ninf %.4e above the regression baseline %.4e", m.k, m.mean_ninf, history[0].mean_ninf)
            if on_iteration is not None:
                on_iteration(new_state, m)
            if cfg.stopping_mode is StoppingMode.MULTIPLIER_DELTA:
                delta = float(np.linalg.norm(new_state.multipliers - state.multipliers))
            else:
                delta = stopping_decrease(history)
            state = new_state
            if delta <= cfg.stopping_tol:
                status = RunStatus.CRITERION
                logger.info("stopping criterion %s met at iter %d (%.3e)", cfg.stopping_mode.value, m.k, delta)
                break
        return RunResult(state, tuple(history), status)

    def evaluate_holdout(
        self,
        state: AdmmState,
        tasks: TaskSet,
        previous: Sequence[Trajectory | None] | None = None,
    ) -> HoldoutResult:
        """学習に使っていないタスクでのnorm-inf誤差

        反復0では元の問題の解、それ以降は予測を目標にした近接項付き問題の解と比べます。"""
        Z = consensus_points(state.weights, tasks, state.gamma)
        if state.iteration == 0:
            reports = self.solve_original(tasks)
        else:
            prev = list(previous) if previous is not None else [None] * len(tasks)
            reports = self.solve_guided(tasks, Z, np.zeros_like(Z), state.rho, prev)
        trajs = tuple(transcribe(self.__spec, t, self.__L_T).trajectory(r.solution) for t, r in zip(tasks, reports))
        solved = tuple(bool(r) for r in reports)
        n_bad = solved.count(False)
        if n_bad:
            logger.warning("holdout at iter %d: %d of %d tasks unsolved and excluded", state.iteration, n_bad, len(tasks))
        p = self.__spec.state_dim
        Xh = Z[:, :-1].reshape(len(tasks), self.__L_T, p)
        errors = np.array(
            [float(np.abs(tr.states - Xh[i]).max()) for i, (tr, ok) in enumerate(zip(trajs, solved)) if ok]
        )
        return HoldoutResult(errors, trajs, solved)

    def continuity_study(
        self, state: AdmmState, n_points: int = 41, coord: int = 0, node_fraction: float = CONTINUITY_NODE_FRACTION
    ) -> ContinuityStudy:
        """1つのタスク座標を掃引し、元の解・誘導された解・予測の状態成分0を比べます。"""
        space = self.__spec.task_space
        if not 0 <= coord < space.dims:
            raise ValueError(f"coordinate {coord} out of range for a {space.dims}-D task space")
        node = math.floor(node_fraction * self.__L_T)
        grid = np.tile(space.center, (n_points, 1))
        grid[:, coord] = np.linspace(space.lower[coord], space.upper[coord], n_points)
        tasks = TaskSet(tuple(Task(tuple(row)) for row in grid), 0, space)
        Z = consensus_points(state.weights, tasks, state.gamma)
        original = self.solve_original(tasks)
        guided = self.solve_guided(tasks, Z, np.zeros_like(Z), state.rho, [None] * n_points)
        p = self.__spec.state_dim

        def feature(reports: list[SolveReport]) -> np.ndarray:
            return np.array([r.solution[node * p] for r in reports])

        return ContinuityStudy(
            tau=grid[:, coord].copy(),
            original=feature(original),
            guided=feature(guided),
            prediction=Z[:, node * p].copy(),
            node=node,
        )
