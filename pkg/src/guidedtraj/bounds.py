"""離散化の解析を実行可能な推定量にしたもの

モンテカルロによるコスト積分と分散、経験的なLipschitz定数、制約違反の上界と
その実測値を扱います。
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any, Final, NamedTuple, Protocol, runtime_checkable

import numpy as np
import pandas as pd
from scipy.optimize import least_squares

from guidedtraj.approximator import ApproximatorWeights
from guidedtraj.collocation import CollocationNlp, transcribe
from guidedtraj.errors import ConfigError, DimensionError
from guidedtraj.nlpsolver import SolverConfig, solve_multistart_batch
from guidedtraj.systems import SystemSpec
from guidedtraj.taskspace import Task, TaskSpace, fit_gumbel_beta, gumbel_expectation_bound, mean_covering_radius

logger = logging.getLogger(__name__)

GROUPS: Final = ("dynamics", "terminal", "path_eq", "path_ineq", "duration")
DEFAULT_SLACK: Final = 1.2
# 予測された所要時間がこれ以下でも残差を評価できるようにする下限
_MIN_DURATION: Final = 1e-6


# 軌道の供給元


@runtime_checkable
class TrajectorySource(Protocol):
    def predict_batch(self, tasks: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]: ...


class WeightsSource:
    """学習済みネットワークの予測。入力列は持たないので復元が必要です。"""

    __slots__ = ("__weights",)
    __weights: ApproximatorWeights

    def __init__(self, weights: ApproximatorWeights) -> None:
        self.__weights = weights

    def predict_batch(self, tasks: np.ndarray) -> tuple[np.ndarray, np.ndarray, None]:
        X, T = self.__weights.predict_batch(np.asarray(tasks, dtype=np.float64))
        return X, T, None


class CallableSource:
    __slots__ = ("__fn",)
    __fn: Callable[[np.ndarray], tuple[np.ndarray, ...]]

    def __init__(self, fn: Callable[[np.ndarray], tuple[np.ndarray, ...]]) -> None:
        self.__fn = fn

    def predict_batch(self, tasks: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        out = self.__fn(np.asarray(tasks, dtype=np.float64))
        if len(out) == 2:
            return np.asarray(out[0]), np.asarray(out[1]), None
        if len(out) == 3:
            return np.asarray(out[0]), np.asarray(out[1]), None if out[2] is None else np.asarray(out[2])
        raise DimensionError("a trajectory callable must return (X, T) or (X, T, U)")


class SolvedTrajectorySource:
    """各タスクを軌道最適化で解いた結果を返します。完全に当てはまったモデルの代わりです。"""

    __slots__ = ("__spec", "__L_T", "__cfg", "__workers")
    __spec: SystemSpec
    __L_T: int
    __cfg: SolverConfig
    __workers: int

    def __init__(self, spec: SystemSpec, L_T: int, cfg: SolverConfig | None = None, workers: int = 1) -> None:
        self.__spec = spec
        self.__L_T = L_T
        self.__cfg = cfg or SolverConfig()
        self.__workers = workers

    def predict_batch(self, tasks: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = self.__spec
        nlps = [transcribe(s, Task(tuple(row)), self.__L_T) for row in np.atleast_2d(tasks)]
        starts = [
            [n.initial_point(r) for r in (s.basin_seeds(n.task, self.__L_T) if s.multi_basin else [None])]
            for n in nlps
        ]
        reports = solve_multistart_batch(nlps, starts, self.__cfg, self.__workers)
        trajs = [n.trajectory(r.solution) for n, r in zip(nlps, reports)]
        return (
            np.stack([t.states for t in trajs]),
            np.array([t.duration for t in trajs]),
            np.stack([t.controls for t in trajs]),
        )


type SourceLike = TrajectorySource | ApproximatorWeights | Callable[[np.ndarray], tuple[np.ndarray, ...]]


def as_source(obj: SourceLike) -> TrajectorySource:
    if isinstance(obj, ApproximatorWeights):
        return WeightsSource(obj)
    if isinstance(obj, WeightsSource | CallableSource | SolvedTrajectorySource):
        return obj
    if callable(obj):
        return CallableSource(obj)
    raise TypeError(f"cannot use {type(obj).__name__} as a trajectory source")


# 入力列の復元


def _decision_vector(nlp: CollocationNlp, X: np.ndarray, U: np.ndarray, T: float) -> np.ndarray:
    return np.concatenate([np.ravel(X), np.ravel(U), [max(float(T), _MIN_DURATION)]])


def _max_violation(groups: dict[str, np.ndarray]) -> float:
    return max((float(g.max()) for g in groups.values() if g.size), default=0.0)


def recover_controls(
    spec: SystemSpec, task: Task, L_T: int, X: np.ndarray, T: float, U0: np.ndarray | None = None
) -> np.ndarray:
    """状態列と所要時間を固定し、等式制約の残差が最小になる入力列を最小二乗で求めます。"""
    nlp = transcribe(spec, task, L_T)
    lo, hi = spec.control_bounds
    q = spec.control_dim
    lo_v, hi_v = np.tile(lo, L_T), np.tile(hi, L_T)
    start = np.zeros(L_T * q) if U0 is None else np.ravel(U0).astype(np.float64)
    # trfは内点から始める必要がある
    start = np.clip(start, lo_v + 1e-9 * (hi_v - lo_v), hi_v - 1e-9 * (hi_v - lo_v))
    cs = nlp.control_slice

    def residual(u: np.ndarray) -> np.ndarray:
        return nlp.eq_residuals(_decision_vector(nlp, X, u, T))

    def jacobian(u: np.ndarray) -> np.ndarray:
        return nlp.eq_jacobian(_decision_vector(nlp, X, u, T))[:, cs]

    sol = least_squares(residual, start, jac=jacobian, bounds=(lo_v, hi_v), method="trf", xtol=1e-14, ftol=1e-14, gtol=1e-14)
    U = sol.x.reshape(L_T, q)
    if U0 is not None:
        U_given = np.asarray(U0, dtype=np.float64).reshape(L_T, q)
        mine = _max_violation(constraint_violations(spec, task, L_T, X, U, T))
        given = _max_violation(constraint_violations(spec, task, L_T, X, U_given, T))
        if given <= mine:
            return U_given
    return U


def constraint_violations(
    spec: SystemSpec, task: Task, L_T: int, X: np.ndarray, U: np.ndarray, T: float
) -> dict[str, np.ndarray]:
    """種類ごとの非負の違反量。所要時間の上下限も制約の一種として扱います。"""
    nlp = transcribe(spec, task, L_T)
    groups = nlp.constraint_groups(_decision_vector(nlp, X, U, T))
    lo, hi = spec.duration_bounds(task)
    groups["duration"] = np.array([max(lo - T, 0.0), max(T - hi, 0.0)])
    return groups


# モンテカルロ積分


class MonteCarloEstimate(NamedTuple):
    integral: float
    variance: float
    n: int


def mc_cost_integral(
    integrand: SourceLike | Callable[[np.ndarray], np.ndarray],
    space: TaskSpace,
    n: int,
    seed: int,
    spec: SystemSpec | None = None,
    L_T: int | None = None,
) -> MonteCarloEstimate:
    """I_N = (V/N) Σ f(τ_i) と Var(I_N) = V² Var(f)/N

    specを渡すとintegrandは軌道の供給元とみなし、f(τ)は軌道の離散コストになります。
    渡さなければintegrandは(n, m)のタスク配列から(n,)の値を返す関数です。"""
    if n < 2:
        raise ValueError(f"Monte-Carlo estimate needs n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    tau = rng.uniform(space.lower_array, space.upper_array, size=(n, space.dims))
    if spec is None:
        f = np.asarray(integrand(tau), dtype=np.float64).reshape(-1)  # type: ignore[operator]
        if f.shape != (n,):
            raise DimensionError(f"integrand returned {f.shape[0]} values for {n} tasks")
    else:
        if L_T is None:
            raise ValueError("L_T is required when integrating a trajectory cost")
        f = trajectory_costs(as_source(integrand), spec, tau, L_T)  # type: ignore[arg-type]
    V = space.volume
    var_f = float(np.var(f, ddof=1))
    return MonteCarloEstimate(V * float(f.mean()), V**2 * var_f / n, n)


def trajectory_costs(source: TrajectorySource, spec: SystemSpec, tau: np.ndarray, L_T: int) -> np.ndarray:
    X, T, U = source.predict_batch(tau)
    costs = np.empty(tau.shape[0])
    for i, row in enumerate(tau):
        task = Task(tuple(row))
        Ui = recover_controls(spec, task, L_T, X[i], float(T[i]), None if U is None else U[i])
        costs[i] = float(T[i]) / L_T * float(spec.running_cost(X[i], Ui, float(T[i])).sum())
    return costs


# Lipschitz定数


@dataclass(frozen=True)
class ProbeConfig:
    method: str = "pairwise"
    n_probes: int = 64
    grid_n: int = 9
    n_jacobian: int = 8
    local_eps: float | None = None
    fd_step: float = 1e-6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in ("pairwise", "grid"):
            raise ConfigError(f"probe method must be 'pairwise' or 'grid', got {self.method!r}")
        if self.n_probes < 2 or self.grid_n < 2 or self.n_jacobian < 1:
            raise ConfigError("probe budget too small")
        if self.local_eps is not None and self.local_eps < 0.0:
            raise ConfigError("local_eps must be >= 0")
        if self.fd_step <= 0.0:
            raise ConfigError("fd_step must be > 0")


@dataclass(frozen=True)
class LipschitzEstimates:
    K: float
    L_dur: float
    m: dict[str, float]
    method: str
    K_local: float
    L_dur_local: float
    local_eps: float | None = None
    n_pairs: int = 0

    def __post_init__(self) -> None:
        values = [self.K, self.L_dur, self.K_local, self.L_dur_local, *self.m.values()]
        if not all(np.isfinite(v) and v >= 0.0 for v in values):
            raise ValueError("Lipschitz constants must be finite and >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "K": self.K,
            "L_dur": self.L_dur,
            "K_local": self.K_local,
            "L_dur_local": self.L_dur_local,
            "m_i": dict(self.m),
            "method": self.method,
            "local_eps": self.local_eps,
            "n_pairs": self.n_pairs,
        }


def _probe_tasks(space: TaskSpace, cfg: ProbeConfig) -> np.ndarray:
    if cfg.method == "grid":
        return space.grid(cfg.grid_n)
    rng = np.random.default_rng(cfg.seed)
    return rng.uniform(space.lower_array, space.upper_array, size=(cfg.n_probes, space.dims))


def _pairs(tau: np.ndarray, cfg: ProbeConfig) -> tuple[np.ndarray, np.ndarray]:
    n = tau.shape[0]
    i, j = np.triu_indices(n, k=1)
    if cfg.method == "grid":
        # 格子では軸方向の隣同士だけを使います(差分商)
        d = np.abs(tau[i] - tau[j])
        step = np.min(np.where(d > 0, d, np.inf), axis=0)
        near = np.isclose(d, step, rtol=1e-9) | (d == 0)
        keep = near.all(axis=1) & ((d > 0).sum(axis=1) == 1)
        i, j = i[keep], j[keep]
    return i, j


def _constraint_constants(
    source: TrajectorySource, spec: SystemSpec, tau: np.ndarray, L_T: int, fd_step: float
) -> dict[str, float]:
    """m_i = max ‖∇_z c_i‖。zは(τ, X, T)で、入力列は復元したものを使います。"""
    X, T, U = source.predict_batch(tau)
    m: dict[str, float] = {}
    steps = fd_step * (spec.task_space.upper_array - spec.task_space.lower_array)
    for k, row in enumerate(tau):
        task = Task(tuple(row))
        Uk = recover_controls(spec, task, L_T, X[k], float(T[k]), None if U is None else U[k])
        rows = _group_rows(spec, task, L_T, X[k], Uk, float(T[k]))
        dtau = _group_rows_tau(spec, row, L_T, X[k], Uk, float(T[k]), steps)
        for name, J in rows.items():
            if J.shape[0] == 0:
                continue
            norms = np.sqrt((J**2).sum(axis=1) + (dtau[name] ** 2).sum(axis=1))
            m[name] = max(m.get(name, 0.0), float(norms.max()))
    return m


def _group_rows(spec: SystemSpec, task: Task, L_T: int, X: np.ndarray, U: np.ndarray, T: float) -> dict[str, np.ndarray]:
    """各制約の(X, T)に関するJacobianの行"""
    nlp = transcribe(spec, task, L_T)
    v = _decision_vector(nlp, X, U, T)
    cols = np.r_[np.arange(L_T * spec.state_dim), nlp.n_vars - 1]
    Jeq = nlp.eq_jacobian(v)[:, cols]
    nd = (L_T - 1) * spec.state_dim
    nt = spec.n_terminal
    out = {"dynamics": Jeq[:nd], "terminal": Jeq[nd : nd + nt]}
    if spec.n_path_eq:
        out["path_eq"] = Jeq[nd + nt :]
    if spec.n_path_ineq:
        out["path_ineq"] = nlp.ineq_jacobian(v)[:, cols]
    dur = np.zeros((2, cols.size))
    dur[0, -1], dur[1, -1] = -1.0, 1.0
    out["duration"] = dur
    return out


def _signed_residuals(spec: SystemSpec, coords: np.ndarray, L_T: int, X: np.ndarray, U: np.ndarray, T: float) -> dict[str, np.ndarray]:
    task = Task(tuple(coords))
    nlp = transcribe(spec, task, L_T)
    v = _decision_vector(nlp, X, U, T)
    eq = nlp.eq_residuals(v)
    nd = (L_T - 1) * spec.state_dim
    nt = spec.n_terminal
    lo, hi = spec.duration_bounds(task)
    out = {"dynamics": eq[:nd], "terminal": eq[nd : nd + nt], "duration": np.array([lo - T, T - hi])}
    if spec.n_path_eq:
        out["path_eq"] = eq[nd + nt :]
    if spec.n_path_ineq:
        out["path_ineq"] = nlp.ineq_residuals(v)
    return out


def _group_rows_tau(
    spec: SystemSpec, coords: np.ndarray, L_T: int, X: np.ndarray, U: np.ndarray, T: float, steps: np.ndarray
) -> dict[str, np.ndarray]:
    """τに関する偏微分を中心差分で求めます。"""
    cols: dict[str, list[np.ndarray]] = {}
    for j in range(coords.size):
        e = np.zeros_like(coords)
        e[j] = steps[j]
        plus = _signed_residuals(spec, coords + e, L_T, X, U, T)
        minus = _signed_residuals(spec, coords - e, L_T, X, U, T)
        for name in plus:
            cols.setdefault(name, []).append((plus[name] - minus[name]) / (2.0 * steps[j]))
    return {name: np.stack(c, axis=1) for name, c in cols.items()}


def estimate_lipschitz(
    source: SourceLike,
    space: TaskSpace,
    probe_cfg: ProbeConfig | None = None,
    spec: SystemSpec | None = None,
    L_T: int | None = None,
) -> LipschitzEstimates:
    """差分商の最大値でK、L_dur、m_iを見積もります。

    specを省略すると制約の定数m_iは求めません。局所定数はlocal_eps以内の組だけの最大値で、
    そのような組がなければ大域の値を使います。"""
    cfg = probe_cfg or ProbeConfig()
    src = as_source(source)
    tau = _probe_tasks(space, cfg)
    X, T, _ = src.predict_batch(tau)
    X = X.reshape(X.shape[0], -1)
    T = np.asarray(T, dtype=np.float64).reshape(-1)
    i, j = _pairs(tau, cfg)
    d = np.sqrt(((tau[i] - tau[j]) ** 2).sum(axis=1))
    ok = d > 0.0
    n_skipped = int((~ok).sum())
    if n_skipped:
        logger.debug("skipped %d degenerate probe pairs", n_skipped)
    i, j, d = i[ok], j[ok], d[ok]
    if d.size == 0:
        raise ValueError("no usable probe pairs")
    qK = np.sqrt(((X[i] - X[j]) ** 2).sum(axis=1)) / d
    qL = np.abs(T[i] - T[j]) / d
    K, L_dur = float(qK.max()), float(qL.max())
    K_loc, L_loc = K, L_dur
    if cfg.local_eps is not None:
        near = d <= cfg.local_eps
        if near.any():
            K_loc, L_loc = float(qK[near].max()), float(qL[near].max())
        else:
            logger.warning("no probe pairs within eps = %.3g; local constants fall back to global ones", cfg.local_eps)
    m: dict[str, float] = {}
    if spec is not None:
        if L_T is None:
            raise ValueError("L_T is required to estimate constraint constants")
        sub = tau[: cfg.n_jacobian]
        m = _constraint_constants(src, spec, sub, L_T, cfg.fd_step)
    logger.info("Lipschitz estimates: K %.4g L_dur %.4g over %d pairs", K, L_dur, d.size)
    return LipschitzEstimates(K, L_dur, m, cfg.method, K_loc, L_loc, cfg.local_eps, int(d.size))


# 違反の上界と実測値


@dataclass(frozen=True)
class ViolationBound:
    bounds: dict[str, float]
    eps: float
    local: bool


def violation_bound(lip: LipschitzEstimates, eps: float, local: bool = False) -> ViolationBound:
    """m_i (1 + K + L_dur) ε"""
    if eps < 0.0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    K, L_dur = (lip.K_local, lip.L_dur_local) if local else (lip.K, lip.L_dur)
    factor = (1.0 + K + L_dur) * eps
    return ViolationBound({name: m_i * factor for name, m_i in lip.m.items()}, float(eps), local)


@dataclass(frozen=True)
class ViolationProfile:
    tasks: np.ndarray
    per_task: dict[str, np.ndarray]
    maxima: dict[str, float] = field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        """タスクごとの違反量。列はtau_j、各制約の種類、全体の最大値です。"""
        cols: dict[str, Any] = {f"tau_{j}": self.tasks[:, j] for j in range(self.tasks.shape[1])}
        cols.update(self.per_task)
        cols["max"] = np.max(np.stack(list(self.per_task.values())), axis=0)
        return pd.DataFrame(cols)


def violation_measured(
    source: SourceLike, spec: SystemSpec, space: TaskSpace, grid_n: int, L_T: int
) -> ViolationProfile:
    """格子上の各タスクで予測軌道の制約違反を求め、種類ごとの最大値μ̂を返します。"""
    if grid_n < 2:
        raise ValueError(f"grid_n must be >= 2, got {grid_n}")
    src = as_source(source)
    tau = space.grid(grid_n)
    X, T, U = src.predict_batch(tau)
    per_task: dict[str, list[float]] = {}
    for k, row in enumerate(tau):
        task = Task(tuple(row))
        Uk = recover_controls(spec, task, L_T, X[k], float(T[k]), None if U is None else U[k])
        for name, g in constraint_violations(spec, task, L_T, X[k], Uk, float(T[k])).items():
            per_task.setdefault(name, []).append(float(g.max()) if g.size else 0.0)
    arrays = {name: np.array(v) for name, v in per_task.items()}
    maxima = {name: float(a.max()) for name, a in arrays.items()}
    logger.info("measured violation over %d grid tasks: %s", tau.shape[0], maxima)
    return ViolationProfile(tau, arrays, maxima)


def gumbel_curve(
    space: TaskSpace, ns: Sequence[int], replicates: int, seed: int, margin: float = 1.25
) -> pd.DataFrame:
    """Nの格子に対する平均被覆半径と β(log N/N)^{1/m}"""
    means = [mean_covering_radius(space, n, replicates, seed + k) for k, n in enumerate(ns)]
    beta = fit_gumbel_beta(ns, means, space.dims, margin)
    return pd.DataFrame(
        {
            "n": list(ns),
            "mean_eps": means,
            "bound": [gumbel_expectation_bound(n, space.dims, beta) for n in ns],
            "beta": beta,
        }
    )


def bounds_report(
    lip: LipschitzEstimates,
    bound: ViolationBound,
    measured: ViolationProfile,
    slack: float = DEFAULT_SLACK,
    atol: float = 0.0,
    **extra: Any,
) -> dict[str, Any]:
    """{K, L_dur, m_i, eps, bound_i, measured_i, dominated}"""
    names = [g for g in GROUPS if g in bound.bounds]
    dominated = {g: bool(measured.maxima.get(g, 0.0) <= slack * bound.bounds[g] + atol) for g in names}
    report = {
        "K": lip.K,
        "L_dur": lip.L_dur,
        "m_i": {g: lip.m[g] for g in names},
        "eps": bound.eps,
        "local": bound.local,
        "slack": slack,
        "bound_i": {g: bound.bounds[g] for g in names},
        "measured_i": {g: measured.maxima.get(g, 0.0) for g in names},
        "dominated": dominated,
    }
    report.update(extra)
    return report
