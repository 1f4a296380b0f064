"""台形則による直接コロケーション。

決定変数の並びは [x_1 … x_{L_T}, u_1 … u_{L_T}, T] で固定です。ノードはL_T個、区間はL_T−1個です。
"""

import logging
from dataclasses import dataclass
from typing import Final

import numpy as np

from guidedtraj._util import _as_vector
from guidedtraj.errors import DimensionError
from guidedtraj.systems import RawTrajectory, SystemSpec
from guidedtraj.taskspace import Task

logger = logging.getLogger(__name__)

MIN_NODES: Final = 2


@dataclass(frozen=True)
class Trajectory:
    """離散化された軌道。状態列(L_T, p)、入力列(L_T, q)、所要時間T"""

    states: np.ndarray
    controls: np.ndarray
    duration: float

    def __post_init__(self) -> None:
        X = np.array(self.states, dtype=np.float64)
        U = np.array(self.controls, dtype=np.float64)
        if X.ndim != 2 or U.ndim != 2 or X.shape[0] != U.shape[0]:
            raise DimensionError(f"inconsistent trajectory shapes {X.shape} and {U.shape}")
        if X.shape[0] < MIN_NODES:
            raise ValueError(f"a trajectory needs at least {MIN_NODES} nodes, got {X.shape[0]}")
        X.setflags(write=False)
        U.setflags(write=False)
        object.__setattr__(self, "states", X)
        object.__setattr__(self, "controls", U)
        object.__setattr__(self, "duration", float(self.duration))

    @staticmethod
    def from_raw(raw: RawTrajectory) -> "Trajectory":
        return Trajectory(*raw)

    @property
    def n_nodes(self) -> int:
        return self.states.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.duration, self.n_nodes)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.states.ravel(), self.controls.ravel(), [self.duration]])

    @staticmethod
    def from_vector(v: np.ndarray, L_T: int, p: int, q: int) -> "Trajectory":
        v = _as_vector(v, L_T * (p + q) + 1, "decision vector")
        nx = L_T * p
        return Trajectory(v[:nx].reshape(L_T, p), v[nx : nx + L_T * q].reshape(L_T, q), v[-1])

    def consensus_vector(self, gamma: float) -> np.ndarray:
        """(X, γT)"""
        return np.concatenate([self.states.ravel(), [gamma * self.duration]])


@dataclass(frozen=True)
class ProximalTerm:
    """ρ/2‖(X, γT) − z + λ‖²"""

    target: np.ndarray
    multiplier: np.ndarray
    rho: float
    gamma: float

    def __post_init__(self) -> None:
        z = np.array(self.target, dtype=np.float64)
        lam = np.array(self.multiplier, dtype=np.float64)
        if z.ndim != 1 or z.shape != lam.shape:
            raise DimensionError(f"target and multiplier shapes differ: {z.shape} vs {lam.shape}")
        if self.rho < 0.0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        z.setflags(write=False)
        lam.setflags(write=False)
        object.__setattr__(self, "target", z)
        object.__setattr__(self, "multiplier", lam)
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "gamma", float(self.gamma))

    def value(self, consensus: np.ndarray) -> float:
        r = consensus - self.target + self.multiplier
        return 0.5 * self.rho * float(r @ r)


def defect_residuals(traj: Trajectory, spec: SystemSpec) -> np.ndarray:
    """台形則の欠損 (x_{t+1} − x_t)/h − (f_t + f_{t+1})/2。(L_T−1)·p個"""
    X, U = traj.states, traj.controls
    if X.shape[1] != spec.state_dim or U.shape[1] != spec.control_dim:
        raise DimensionError(f"trajectory dimensions {X.shape[1]}/{U.shape[1]} do not match {spec.name}")
    h = traj.duration / (traj.n_nodes - 1)
    f = spec.dynamics(X, U)
    return ((X[1:] - X[:-1]) / h - 0.5 * (f[:-1] + f[1:])).ravel()


class CollocationNlp:
    """転写された非線形計画問題

    目的関数は (T/L_T) Σ l(x_t, u_t, T) に必要なら近接項を加えたもの、等式制約は
    台形則の欠損、終端制約、経路等式制約、不等式制約は経路不等式制約です。"""

    __slots__ = (
        "__spec",
        "__task",
        "__L_T",
        "__prox",
        "__lower",
        "__upper",
        "__phase",
        "__cache_key",
        "__cache",
    )
    __spec: SystemSpec
    __task: Task
    __L_T: int
    __prox: ProximalTerm | None
    __lower: np.ndarray
    __upper: np.ndarray
    __phase: np.ndarray
    __cache_key: np.ndarray | None
    __cache: tuple[np.ndarray, ...] | None

    def __init__(self, spec: SystemSpec, task: Task, L_T: int, prox: ProximalTerm | None = None) -> None:
        if L_T < MIN_NODES:
            raise ValueError(f"L_T must be >= {MIN_NODES}, got {L_T}")
        spec.check_task(task)
        p, q = spec.state_dim, spec.control_dim
        if prox is not None and prox.target.shape[0] != L_T * p + 1:
            raise DimensionError(f"proximal target must have length {L_T * p + 1}, got {prox.target.shape[0]}")
        self.__spec = spec
        self.__task = task
        self.__L_T = L_T
        self.__prox = prox
        x_lo, x_hi = spec.state_bounds
        u_lo, u_hi = spec.control_bounds
        t_lo, t_hi = spec.duration_bounds(task)
        self.__lower = np.concatenate([np.tile(x_lo, L_T), np.tile(u_lo, L_T), [t_lo]])
        self.__upper = np.concatenate([np.tile(x_hi, L_T), np.tile(u_hi, L_T), [t_hi]])
        self.__phase = np.linspace(0.0, 1.0, L_T)
        self.__cache_key = None
        self.__cache = None

    @property
    def spec(self) -> SystemSpec:
        return self.__spec

    @property
    def task(self) -> Task:
        return self.__task

    @property
    def L_T(self) -> int:
        return self.__L_T

    @property
    def prox(self) -> ProximalTerm | None:
        return self.__prox

    @property
    def n_vars(self) -> int:
        return self.__L_T * (self.__spec.state_dim + self.__spec.control_dim) + 1

    @property
    def n_eq(self) -> int:
        s = self.__spec
        return (self.__L_T - 1) * s.state_dim + s.n_terminal + self.__L_T * s.n_path_eq

    @property
    def n_ineq(self) -> int:
        return self.__L_T * self.__spec.n_path_ineq

    @property
    def lower(self) -> np.ndarray:
        return self.__lower

    @property
    def upper(self) -> np.ndarray:
        return self.__upper

    @property
    def state_slice(self) -> slice:
        return slice(0, self.__L_T * self.__spec.state_dim)

    @property
    def control_slice(self) -> slice:
        nx = self.__L_T * self.__spec.state_dim
        return slice(nx, nx + self.__L_T * self.__spec.control_dim)

    def split(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        p, q, L = self.__spec.state_dim, self.__spec.control_dim, self.__L_T
        v = _as_vector(v, self.n_vars, "decision vector")
        return v[: L * p].reshape(L, p), v[L * p : L * (p + q)].reshape(L, q), float(v[-1])

    def trajectory(self, v: np.ndarray) -> Trajectory:
        X, U, T = self.split(v)
        return Trajectory(X, U, T)

    def project(self, v: np.ndarray) -> np.ndarray:
        return np.clip(v, self.__lower, self.__upper)

    def initial_point(self, traj: Trajectory | RawTrajectory | None = None) -> np.ndarray:
        if traj is None:
            traj = self.__spec.initial_guess(self.__task, self.__L_T)
        if not isinstance(traj, Trajectory):
            traj = Trajectory.from_raw(traj)
        if traj.n_nodes != self.__L_T:
            raise DimensionError(f"initial trajectory has {traj.n_nodes} nodes, expected {self.__L_T}")
        return self.project(traj.to_vector())

    def _node_data(self, v: np.ndarray) -> tuple[np.ndarray, ...]:
        if self.__cache_key is not None and np.array_equal(self.__cache_key, v):
            return self.__cache  # type: ignore[return-value]
        # X, Uは呼び出し側の配列ではなく手元のコピーのビューにする
        key = np.array(v, dtype=np.float64, copy=True)
        X, U, T = self.split(key)
        f = self.__spec.dynamics(X, U)
        A, B = self.__spec.dynamics_jacobian(X, U)
        self.__cache_key = key
        self.__cache = (X, U, np.float64(T), f, A, B)
        return self.__cache

    # 目的関数

    def cost(self, v: np.ndarray) -> float:
        """近接項を含まない離散コスト L(X, U, T)"""
        X, U, T = self.split(v)
        return T / self.__L_T * float(self.__spec.running_cost(X, U, T).sum())

    def objective(self, v: np.ndarray) -> float:
        value = self.cost(v)
        if self.__prox is not None:
            X, _, T = self.split(v)
            value += self.__prox.value(np.concatenate([X.ravel(), [self.__prox.gamma * T]]))
        return value

    def objective_gradient(self, v: np.ndarray) -> np.ndarray:
        X, U, T = self.split(v)
        L = self.__L_T
        l = self.__spec.running_cost(X, U, T)
        lx, lu, lT = self.__spec.running_cost_gradient(X, U, T)
        gX = T / L * lx
        gT = float(l.sum()) / L + T / L * float(np.sum(lT))
        if self.__prox is not None:
            pr = self.__prox
            r = np.concatenate([X.ravel(), [pr.gamma * T]]) - pr.target + pr.multiplier
            gX = gX + pr.rho * r[:-1].reshape(X.shape)
            gT += pr.rho * pr.gamma * r[-1]
        return np.concatenate([gX.ravel(), (T / L * lu).ravel(), [gT]])

    def objective_and_gradient(self, v: np.ndarray) -> tuple[float, np.ndarray]:
        return self.objective(v), self.objective_gradient(v)

    # 等式制約

    def eq_residuals(self, v: np.ndarray) -> np.ndarray:
        X, U, T, f, _, _ = self._node_data(v)
        h = T / (self.__L_T - 1)
        defects = (X[1:] - X[:-1]) / h - 0.5 * (f[:-1] + f[1:])
        s = self.__spec
        term = s.terminal_constraint(self.__task, X[0], U[0], X[-1], U[-1], T)
        peq = s.path_eq(self.__task, X, U, self.__phase)
        return np.concatenate([defects.ravel(), term, peq.ravel()])

    def eq_vjp(self, v: np.ndarray, w: np.ndarray) -> np.ndarray:
        """J_eq(v)ᵀ w"""
        X, U, T, f, A, B = self._node_data(v)
        s = self.__spec
        p, L = s.state_dim, self.__L_T
        h = T / (L - 1)
        nd = (L - 1) * p
        wd = w[:nd].reshape(L - 1, p)
        wt = w[nd : nd + s.n_terminal]
        wp = w[nd + s.n_terminal :].reshape(L, s.n_path_eq)

        gX = np.zeros_like(X)
        gU = np.zeros_like(U)
        AtW0 = np.einsum("tij,ti->tj", A[:-1], wd)
        AtW1 = np.einsum("tij,ti->tj", A[1:], wd)
        gX[:-1] += -wd / h - 0.5 * AtW0
        gX[1:] += wd / h - 0.5 * AtW1
        gU[:-1] -= 0.5 * np.einsum("tij,ti->tj", B[:-1], wd)
        gU[1:] -= 0.5 * np.einsum("tij,ti->tj", B[1:], wd)
        gT = -float(np.sum(wd * (X[1:] - X[:-1]))) / (h * T)

        Jx0, Ju0, JxT, JuT, JT = s.terminal_constraint_jacobian(self.__task, X[0], U[0], X[-1], U[-1], T)
        gX[0] += Jx0.T @ wt
        gU[0] += Ju0.T @ wt
        gX[-1] += JxT.T @ wt
        gU[-1] += JuT.T @ wt
        gT += float(JT @ wt)

        if s.n_path_eq:
            Jx, Ju = s.path_eq_jacobian(self.__task, X, U, self.__phase)
            gX += np.einsum("tjp,tj->tp", Jx, wp)
            gU += np.einsum("tjq,tj->tq", Ju, wp)
        return np.concatenate([gX.ravel(), gU.ravel(), [gT]])

    def eq_jacobian(self, v: np.ndarray) -> np.ndarray:
        """等式制約の密なJacobian。形状は(n_eq, n_vars)です。"""
        X, U, T, f, A, B = self._node_data(v)
        s = self.__spec
        p, q, L = s.state_dim, s.control_dim, self.__L_T
        h = T / (L - 1)
        nx = L * p
        J = np.zeros((self.n_eq, self.n_vars))
        eye = np.eye(p)
        for t in range(L - 1):
            r = slice(t * p, (t + 1) * p)
            J[r, t * p : (t + 1) * p] = -eye / h - 0.5 * A[t]
            J[r, (t + 1) * p : (t + 2) * p] = eye / h - 0.5 * A[t + 1]
            J[r, nx + t * q : nx + (t + 1) * q] = -0.5 * B[t]
            J[r, nx + (t + 1) * q : nx + (t + 2) * q] = -0.5 * B[t + 1]
            J[r, -1] = -(X[t + 1] - X[t]) / (h * T)
        row = (L - 1) * p
        Jx0, Ju0, JxT, JuT, JT = s.terminal_constraint_jacobian(self.__task, X[0], U[0], X[-1], U[-1], T)
        r = slice(row, row + s.n_terminal)
        J[r, 0:p] += Jx0
        J[r, nx : nx + q] += Ju0
        J[r, (L - 1) * p : L * p] += JxT
        J[r, nx + (L - 1) * q : nx + L * q] += JuT
        J[r, -1] += JT
        row += s.n_terminal
        if s.n_path_eq:
            Jx, Ju = s.path_eq_jacobian(self.__task, X, U, self.__phase)
            self._fill_path_rows(J, row, Jx, Ju)
        return J

    # 不等式制約

    def ineq_residuals(self, v: np.ndarray) -> np.ndarray:
        X, U, _, _, _, _ = self._node_data(v)
        return self.__spec.path_ineq(self.__task, X, U, self.__phase).ravel()

    def ineq_vjp(self, v: np.ndarray, w: np.ndarray) -> np.ndarray:
        """J_in(v)ᵀ w"""
        X, U, _, _, _, _ = self._node_data(v)
        s = self.__spec
        g = np.zeros(self.n_vars)
        if not s.n_path_ineq:
            return g
        Jx, Ju = s.path_ineq_jacobian(self.__task, X, U, self.__phase)
        wp = w.reshape(self.__L_T, s.n_path_ineq)
        g[self.state_slice] = np.einsum("tjp,tj->tp", Jx, wp).ravel()
        g[self.control_slice] = np.einsum("tjq,tj->tq", Ju, wp).ravel()
        return g

    def ineq_jacobian(self, v: np.ndarray) -> np.ndarray:
        X, U, _, _, _, _ = self._node_data(v)
        s = self.__spec
        J = np.zeros((self.n_ineq, self.n_vars))
        if s.n_path_ineq:
            Jx, Ju = s.path_ineq_jacobian(self.__task, X, U, self.__phase)
            self._fill_path_rows(J, 0, Jx, Ju)
        return J

    def _fill_path_rows(self, J: np.ndarray, row: int, Jx: np.ndarray, Ju: np.ndarray) -> None:
        p, q = self.__spec.state_dim, self.__spec.control_dim
        nx = self.__L_T * p
        n = Jx.shape[1]
        for t in range(self.__L_T):
            r = slice(row + t * n, row + (t + 1) * n)
            J[r, t * p : (t + 1) * p] = Jx[t]
            J[r, nx + t * q : nx + (t + 1) * q] = Ju[t]

    def constraint_groups(self, v: np.ndarray) -> dict[str, np.ndarray]:
        """制約の種類ごとの違反量。空の種類は含みません。"""
        s = self.__spec
        eq = self.eq_residuals(v)
        nd = (self.__L_T - 1) * s.state_dim
        groups = {
            "dynamics": np.abs(eq[:nd]),
            "terminal": np.abs(eq[nd : nd + s.n_terminal]),
        }
        if s.n_path_eq:
            groups["path_eq"] = np.abs(eq[nd + s.n_terminal :])
        if s.n_path_ineq:
            groups["path_ineq"] = np.maximum(self.ineq_residuals(v), 0.0)
        return groups

    def feasibility(self, v: np.ndarray) -> float:
        """違反している制約の最大ノルム"""
        eq = self.eq_residuals(v)
        ineq = self.ineq_residuals(v)
        parts = [np.abs(eq), np.maximum(ineq, 0.0)]
        return float(max((a.max() for a in parts if a.size), default=0.0))


def transcribe(spec: SystemSpec, task: Task, L_T: int, prox: ProximalTerm | None = None) -> CollocationNlp:
    return CollocationNlp(spec, task, L_T, prox)
