"""拡張ラグランジュ法による非線形計画ソルバー

外側ループで乗数とペナルティを更新し、内側では箱制約付きの準ニュートン法
(scipyのL-BFGS-B)で拡張ラグランジュ関数を最小化します。不等式は max(0, ·)² で扱います。
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from itertools import repeat
from multiprocessing import Pool
from typing import Any, Final, Protocol

import numpy as np
from scipy.optimize import Bounds, minimize

from guidedtraj.errors import ConfigError, GuidedTrajError, SolveError

logger = logging.getLogger(__name__)

# 1回の外側反復で許容する実行可能性の悪化率
_FEAS_SLACK: Final = 1.1
# これより改善しなければペナルティを増やす
_FEAS_DECREASE: Final = 0.25


class NlpProblem(Protocol):
    @property
    def n_vars(self) -> int: ...
    @property
    def n_eq(self) -> int: ...
    @property
    def n_ineq(self) -> int: ...
    @property
    def lower(self) -> np.ndarray: ...
    @property
    def upper(self) -> np.ndarray: ...
    def initial_point(self) -> np.ndarray: ...
    def objective(self, v: np.ndarray) -> float: ...
    def objective_and_gradient(self, v: np.ndarray) -> tuple[float, np.ndarray]: ...
    def eq_residuals(self, v: np.ndarray) -> np.ndarray: ...
    def eq_vjp(self, v: np.ndarray, w: np.ndarray) -> np.ndarray: ...
    def ineq_residuals(self, v: np.ndarray) -> np.ndarray: ...
    def ineq_vjp(self, v: np.ndarray, w: np.ndarray) -> np.ndarray: ...


class SolveStatus(StrEnum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    INFEASIBLE_POINT = "infeasible_point"
    # 求解中に例外が起きた(バッチ内でだけ使います)
    ERROR = "error"


@dataclass(frozen=True)
class LineSearchConfig:
    """内側のL-BFGS-Bに渡すパラメータ"""

    maxcor: int = 20
    maxls: int = 40
    ftol: float = 1e-15

    def __post_init__(self) -> None:
        if self.maxcor < 1 or self.maxls < 1 or self.ftol < 0.0:
            raise ConfigError(f"invalid line-search settings {self}")


@dataclass(frozen=True)
class SolverConfig:
    max_outer: int = 30
    max_inner: int = 2000
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e8
    feas_tol: float = 1e-6
    opt_tol: float = 1e-5
    # 実行可能性が改善しない外側反復がこの回数続くとinfeasible_point
    stall_outer: int = 5
    inner_step: LineSearchConfig = field(default_factory=LineSearchConfig)

    def __post_init__(self) -> None:
        if self.feas_tol <= 0.0 or self.opt_tol <= 0.0:
            raise ConfigError("solver tolerances must be positive")
        if self.penalty_growth <= 1.0:
            raise ConfigError(f"penalty_growth must be > 1, got {self.penalty_growth}")
        if self.penalty_init <= 0.0 or self.penalty_max < self.penalty_init:
            raise ConfigError("penalty_init must be positive and not above penalty_max")
        if self.max_outer < 1 or self.max_inner < 1 or self.stall_outer < 1:
            raise ConfigError("iteration budgets must be >= 1")
        if isinstance(self.inner_step, dict):
            object.__setattr__(self, "inner_step", LineSearchConfig(**self.inner_step))


@dataclass(frozen=True)
class SolveReport:
    """求解結果。収束したときだけ真になります。"""

    solution: np.ndarray
    objective: float
    feas_residual: float
    status: SolveStatus
    inner_iterations: int
    outer_iterations: int = 0
    stationarity: float = math.inf
    penalty: float = 0.0
    eq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ineq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    multiplier_delta: float = math.inf
    feas_history: tuple[float, ...] = ()

    def __bool__(self) -> bool:
        return self.status is SolveStatus.CONVERGED

    @property
    def value(self) -> np.ndarray:
        """解。収束していなければSolveErrorを送出します。"""
        if not self:
            raise SolveError(self.status.value, self.feas_residual)
        return self.solution

    def log_row(self, task_index: int, cfg: SolverConfig) -> dict[str, Any]:
        return {
            "task_index": task_index,
            "status": self.status.value,
            "objective": self.objective,
            "feas_residual": self.feas_residual,
            "iterations": self.inner_iterations,
            "outer_iterations": self.outer_iterations,
            "feas_tol": cfg.feas_tol,
            "opt_tol": cfg.opt_tol,
        }


def _augmented_lagrangian(
    x: np.ndarray, nlp: NlpProblem, y: np.ndarray, z: np.ndarray, mu: float
) -> tuple[float, np.ndarray]:
    f, grad = nlp.objective_and_gradient(x)
    value = f
    if nlp.n_eq:
        c = nlp.eq_residuals(x)
        value += float(y @ c) + 0.5 * mu * float(c @ c)
        grad = grad + nlp.eq_vjp(x, y + mu * c)
    if nlp.n_ineq:
        g = nlp.ineq_residuals(x)
        s = np.maximum(0.0, z + mu * g)
        value += (float(s @ s) - float(z @ z)) / (2.0 * mu)
        grad = grad + nlp.ineq_vjp(x, s)
    return value, grad


def _violation(nlp: NlpProblem, x: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    c = nlp.eq_residuals(x) if nlp.n_eq else np.zeros(0)
    g = nlp.ineq_residuals(x) if nlp.n_ineq else np.zeros(0)
    feas = max(float(np.abs(c).max(initial=0.0)), float(np.maximum(g, 0.0).max(initial=0.0)))
    return feas, c, g


def projected_gradient_norm(x: np.ndarray, grad: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> float:
    return float(np.abs(x - np.clip(x - grad, lower, upper)).max(initial=0.0))


def solve(nlp: NlpProblem, warm_start: np.ndarray | None = None, cfg: SolverConfig | None = None) -> SolveReport:
    """局所解を求めます。

    Args:
        nlp: 問題
        warm_start: 初期点。箱の外にあれば射影します。
        cfg: ソルバー設定
    """
    cfg = cfg or SolverConfig()
    lo, hi = nlp.lower, nlp.upper
    x = np.clip(np.asarray(warm_start, dtype=np.float64) if warm_start is not None else nlp.initial_point(), lo, hi)
    bounds = Bounds(lo, hi)
    options = {
        "maxiter": cfg.max_inner,
        "maxcor": cfg.inner_step.maxcor,
        "maxls": cfg.inner_step.maxls,
        "ftol": cfg.inner_step.ftol,
        "gtol": cfg.opt_tol,
    }

    y = np.zeros(nlp.n_eq)
    z = np.zeros(nlp.n_ineq)
    mu = cfg.penalty_init
    status = SolveStatus.MAX_ITER
    history: list[float] = []
    best_feas = math.inf
    stalled = 0
    inner_total = 0
    outer = 0
    stationarity = math.inf
    multiplier_delta = math.inf

    while outer < cfg.max_outer:
        outer += 1
        res = minimize(
            _augmented_lagrangian, x, args=(nlp, y, z, mu), jac=True, method="L-BFGS-B", bounds=bounds, options=options
        )
        inner_total += int(res.nit)
        x_new = np.clip(res.x, lo, hi)
        feas, c, g = _violation(nlp, x_new)

        if history and feas > _FEAS_SLACK * history[-1] and feas > cfg.feas_tol and mu < cfg.penalty_max:
            # 実行可能性が悪化した反復は捨て、ペナルティを上げてやり直す
            mu = min(mu * cfg.penalty_growth, cfg.penalty_max)
            logger.debug("outer %d rejected: feas %.3e > %.3e, penalty -> %.1e", outer, feas, history[-1], mu)
            continue

        x = x_new
        y_new = y + mu * c
        z_new = np.maximum(0.0, z + mu * g)
        multiplier_delta = float(
            max(np.abs(y_new - y).max(initial=0.0), np.abs(z_new - z).max(initial=0.0))
        )
        y, z = y_new, z_new
        _, grad_f = nlp.objective_and_gradient(x)
        grad_l = grad_f
        if nlp.n_eq:
            grad_l = grad_l + nlp.eq_vjp(x, y)
        if nlp.n_ineq:
            grad_l = grad_l + nlp.ineq_vjp(x, z)
        stationarity = projected_gradient_norm(x, grad_l, lo, hi)
        prev = history[-1] if history else math.inf
        history.append(feas)
        logger.debug(
            "outer %d: feas %.3e stationarity %.3e penalty %.1e inner %d", outer, feas, stationarity, mu, res.nit
        )

        if feas <= cfg.feas_tol and stationarity <= cfg.opt_tol:
            status = SolveStatus.CONVERGED
            break
        if feas > cfg.feas_tol:
            if feas < (1.0 - 1e-3) * best_feas:
                best_feas = feas
                stalled = 0
            else:
                stalled += 1
            if stalled >= cfg.stall_outer:
                status = SolveStatus.INFEASIBLE_POINT
                break
            if feas > _FEAS_DECREASE * prev:
                mu = min(mu * cfg.penalty_growth, cfg.penalty_max)

    final_feas = history[-1] if history else _violation(nlp, x)[0]
    return SolveReport(
        solution=x,
        objective=float(nlp.objective(x)),
        feas_residual=final_feas,
        status=status,
        inner_iterations=inner_total,
        outer_iterations=outer,
        stationarity=stationarity,
        penalty=mu,
        eq_multipliers=y,
        ineq_multipliers=z,
        multiplier_delta=multiplier_delta,
        feas_history=tuple(history),
    )


def _better(a: SolveReport, b: SolveReport) -> bool:
    if bool(a) != bool(b):
        return bool(a)
    if a:
        return a.objective < b.objective
    return a.feas_residual < b.feas_residual


def solve_multistart(
    nlp: NlpProblem, starts: Sequence[np.ndarray | None], cfg: SolverConfig | None = None
) -> SolveReport:
    """各初期点から解き、収束したもののうち目的関数が最小の結果を返します。"""
    if not starts:
        raise ValueError("at least one start is required")
    best: SolveReport | None = None
    for start in starts:
        report = solve(nlp, start, cfg)
        if best is None or _better(report, best):
            best = report
    assert best is not None
    return best


# バッチ内の1要素の例外はその要素の失敗として記録する
_ELEMENT_ERRORS: Final = (ArithmeticError, ValueError, GuidedTrajError)


def _error_report(nlp: NlpProblem, e: Exception) -> SolveReport:
    try:
        x = np.clip(nlp.initial_point(), nlp.lower, nlp.upper)
    except _ELEMENT_ERRORS:
        x = np.zeros(nlp.n_vars)
    logger.warning("solve raised %s: %s", type(e).__name__, e)
    return SolveReport(solution=x, objective=math.nan, feas_residual=math.inf, status=SolveStatus.ERROR, inner_iterations=0)


def _solve_element(nlp: NlpProblem, warm_start: np.ndarray | None, cfg: SolverConfig) -> SolveReport:
    try:
        return solve(nlp, warm_start, cfg)
    except _ELEMENT_ERRORS as e:
        return _error_report(nlp, e)


def _multistart_element(nlp: NlpProblem, starts: Sequence[np.ndarray | None], cfg: SolverConfig) -> SolveReport:
    try:
        return solve_multistart(nlp, starts, cfg)
    except _ELEMENT_ERRORS as e:
        return _error_report(nlp, e)


def solve_batch(
    nlps: Sequence[NlpProblem],
    warm_starts: Sequence[np.ndarray | None] | None = None,
    cfg: SolverConfig | None = None,
    workers: int = 1,
) -> list[SolveReport]:
    """タスク番号順に並んだ結果を返します。個々の失敗で全体が止まることはありません。"""
    starts = list(warm_starts) if warm_starts is not None else [None] * len(nlps)
    if len(starts) != len(nlps):
        raise ValueError(f"{len(nlps)} problems but {len(starts)} warm starts")
    cfg = cfg or SolverConfig()
    if workers <= 1 or len(nlps) <= 1:
        reports = [_solve_element(n, s, cfg) for n, s in zip(nlps, starts)]
    else:
        with Pool(processes=min(workers, len(nlps))) as pool:
            reports = pool.starmap(_solve_element, zip(nlps, starts, repeat(cfg)))
    _log_batch(reports)
    return reports


def solve_multistart_batch(
    nlps: Sequence[NlpProblem],
    starts: Sequence[Sequence[np.ndarray | None]],
    cfg: SolverConfig | None = None,
    workers: int = 1,
) -> list[SolveReport]:
    if len(starts) != len(nlps):
        raise ValueError(f"{len(nlps)} problems but {len(starts)} start lists")
    cfg = cfg or SolverConfig()
    if workers <= 1 or len(nlps) <= 1:
        reports = [_multistart_element(n, s, cfg) for n, s in zip(nlps, starts)]
    else:
        with Pool(processes=min(workers, len(nlps))) as pool:
            reports = pool.starmap(_multistart_element, zip(nlps, starts, repeat(cfg)))
    _log_batch(reports)
    return reports


def _log_batch(reports: Sequence[SolveReport]) -> None:
    failed = [i for i, r in enumerate(reports) if not r]
    if failed:
        logger.warning("%d of %d solves did not converge (tasks %s)", len(failed), len(reports), failed[:10])
    else:
        logger.debug("all %d solves converged", len(reports))
