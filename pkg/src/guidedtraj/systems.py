"""タスクでパラメータ化された力学系。ダイナミクス、走行コスト、制約、解析解を提供します。

配列はすべて末尾軸が成分です。状態は(..., p)、入力は(..., q)の形状を取ります。
"""

import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Callable
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, ClassVar, override

import numpy as np

from guidedtraj.errors import ConfigError, DimensionError, UnknownSystemError
from guidedtraj.taskspace import Task, TaskSpace

if TYPE_CHECKING:
    from guidedtraj.collocation import Trajectory

logger = logging.getLogger(__name__)

type RawTrajectory = tuple[np.ndarray, np.ndarray, float]


@dataclass(frozen=True)
class OracleSolution:
    """解析的な最適解"""

    state_fn: Callable[[np.ndarray], np.ndarray]
    control_fn: Callable[[np.ndarray], np.ndarray]
    duration: float
    cost: float

    def sample(self, L_T: int) -> "Trajectory":
        from guidedtraj.collocation import Trajectory

        t = np.linspace(0.0, self.duration, L_T)
        return Trajectory(self.state_fn(t), self.control_fn(t), self.duration)


class SystemSpec(ABC):
    """時不変の連続時間力学系と、そのタスク依存の制約"""

    name: ClassVar[str]
    state_dim: ClassVar[int]
    control_dim: ClassVar[int]
    # 局所解が複数あり、初期値を変えて解く必要がある系
    multi_basin: ClassVar[bool] = False

    __slots__ = ("_task_space", "_x_lower", "_x_upper", "_u_lower", "_u_upper")
    _task_space: TaskSpace
    _x_lower: np.ndarray
    _x_upper: np.ndarray
    _u_lower: np.ndarray
    _u_upper: np.ndarray

    def __init__(self, task_space: TaskSpace, state_bound: tuple[float, ...], control_bound: float) -> None:
        if len(state_bound) != self.state_dim:
            raise ConfigError(f"{self.name}: state_bound needs {self.state_dim} entries")
        self._task_space = task_space
        self._x_upper = np.array(state_bound, dtype=np.float64)
        self._x_lower = -self._x_upper
        self._u_upper = np.full(self.control_dim, float(control_bound))
        self._u_lower = -self._u_upper

    @staticmethod
    def create(name: str, task_space: TaskSpace, **params: Any) -> "SystemSpec":
        """名前から系を作成します。"""
        try:
            cls = _REGISTRY[name]
        except KeyError:
            raise UnknownSystemError(name, tuple(_REGISTRY)) from None
        try:
            return cls(task_space, **params)
        except TypeError as e:
            raise ConfigError(f"invalid parameters for system {name!r}: {e}") from e

    @property
    def task_space(self) -> TaskSpace:
        return self._task_space

    @property
    def state_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self._x_lower, self._x_upper

    @property
    def control_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self._u_lower, self._u_upper

    def check_task(self, task: Task) -> None:
        if task.dims != self._task_space.dims:
            raise DimensionError(f"{self.name} expects {self._task_space.dims}-D tasks, got {task.dims}-D")

    # ダイナミクス

    @abstractmethod
    def dynamics(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def dynamics_jacobian(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(∂f/∂x, ∂f/∂u)。形状は(..., p, p)と(..., p, q)です。"""

    # コスト

    def running_cost(self, x: np.ndarray, u: np.ndarray, T: float) -> np.ndarray:
        return (np.asarray(u) ** 2).sum(axis=-1)

    def running_cost_gradient(self, x: np.ndarray, u: np.ndarray, T: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        u = np.asarray(u)
        return np.zeros_like(np.asarray(x, dtype=np.float64)), 2.0 * u, np.zeros(u.shape[:-1])

    # 制約

    @abstractmethod
    def duration_bounds(self, task: Task) -> tuple[float, float]: ...

    @abstractmethod
    def terminal_targets(self, task: Task) -> tuple[np.ndarray, np.ndarray]:
        """(x(0), x(T))の目標値"""

    @property
    def n_terminal(self) -> int:
        return 2 * self.state_dim

    def terminal_constraint(
        self, task: Task, x0: np.ndarray, u0: np.ndarray, xT: np.ndarray, uT: np.ndarray, T: float
    ) -> np.ndarray:
        a, b = self.terminal_targets(task)
        return np.concatenate([np.asarray(x0) - a, np.asarray(xT) - b])

    def terminal_constraint_jacobian(
        self, task: Task, x0: np.ndarray, u0: np.ndarray, xT: np.ndarray, uT: np.ndarray, T: float
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(∂/∂x0, ∂/∂u0, ∂/∂xT, ∂/∂uT, ∂/∂T)"""
        p, q = self.state_dim, self.control_dim
        eye = np.eye(p)
        zp = np.zeros((p, p))
        zq = np.zeros((2 * p, q))
        return np.vstack([eye, zp]), zq, np.vstack([zp, eye]), zq.copy(), np.zeros(2 * p)

    @property
    def n_path_ineq(self) -> int:
        return 0

    def path_ineq(self, task: Task, x: np.ndarray, u: np.ndarray, s: np.ndarray) -> np.ndarray:
        """経路上の不等式制約(≤0で実行可能)。sは位相t/Tです。"""
        return np.zeros((np.asarray(x).shape[0], 0))

    def path_ineq_jacobian(
        self, task: Task, x: np.ndarray, u: np.ndarray, s: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        n = np.asarray(x).shape[0]
        return np.zeros((n, 0, self.state_dim)), np.zeros((n, 0, self.control_dim))

    @property
    def n_path_eq(self) -> int:
        return 0

    def path_eq(self, task: Task, x: np.ndarray, u: np.ndarray, s: np.ndarray) -> np.ndarray:
        return np.zeros((np.asarray(x).shape[0], 0))

    def path_eq_jacobian(
        self, task: Task, x: np.ndarray, u: np.ndarray, s: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        n = np.asarray(x).shape[0]
        return np.zeros((n, 0, self.state_dim)), np.zeros((n, 0, self.control_dim))

    # 初期値

    def initial_guess(self, task: Task, L_T: int) -> RawTrajectory:
        """端点を直線で結んだ初期値"""
        self.check_task(task)
        a, b = self.terminal_targets(task)
        lo, hi = self.duration_bounds(task)
        T = 0.5 * (lo + hi)
        s = np.linspace(0.0, 1.0, L_T)[:, None]
        X = (1.0 - s) * a + s * b
        return X, np.zeros((L_T, self.control_dim)), T

    def basin_seeds(self, task: Task, L_T: int) -> list[RawTrajectory]:
        return [self.initial_guess(task, L_T)]

    def oracle(self, task: Task) -> OracleSolution | None:
        return None

    def params(self) -> dict[str, Any]:
        return {}


class DoubleIntegrator(SystemSpec):
    """二重積分器。状態(位置, 速度)、入力は加速度です。

    タスクは(d)または(d, T_des)です。T_desが無い場合、所要時間はduration_bounds内で最適化されます。"""

    name = "double_integrator"
    state_dim = 2
    control_dim = 1

    __slots__ = ("__duration_box",)
    __duration_box: tuple[float, float]

    def __init__(
        self,
        task_space: TaskSpace,
        duration_bounds: tuple[float, float] = (0.5, 2.0),
        state_bound: tuple[float, float] = (10.0, 50.0),
        control_bound: float = 1000.0,
    ) -> None:
        if task_space.dims not in (1, 2):
            raise ConfigError(f"double_integrator needs a 1-D or 2-D task space, got {task_space.dims}-D")
        lo, hi = (float(x) for x in duration_bounds)
        if not 0.0 < lo <= hi:
            raise ConfigError(f"invalid duration bounds {duration_bounds}")
        super().__init__(task_space, tuple(state_bound), control_bound)
        self.__duration_box = (lo, hi)

    @override
    def dynamics(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        return np.stack([x[..., 1], u[..., 0]], axis=-1)

    @override
    def dynamics_jacobian(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        shape = np.asarray(x).shape[:-1]
        A = np.zeros(shape + (2, 2))
        A[..., 0, 1] = 1.0
        B = np.zeros(shape + (2, 1))
        B[..., 1, 0] = 1.0
        return A, B

    @override
    def duration_bounds(self, task: Task) -> tuple[float, float]:
        if task.dims == 2:
            return task[1], task[1]
        return self.__duration_box

    @override
    def terminal_targets(self, task: Task) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(2), np.array([task[0], 0.0])

    @override
    def initial_guess(self, task: Task, L_T: int) -> RawTrajectory:
        X, U, T = super().initial_guess(task, L_T)
        X[:, 1] = task[0] / T
        return X, U, T

    @override
    def oracle(self, task: Task) -> OracleSolution | None:
        if task.dims != 2:
            return None
        return double_integrator_oracle(task[0], task[1])

    @override
    def params(self) -> dict[str, Any]:
        return {"duration_bounds": list(self.__duration_box)}


class Pendulum(SystemSpec):
    """振り上げ問題の振子。ẋ = (ω, (u − c sinθ)/I)、タスクは(θ_goal, T_des)です。"""

    name = "pendulum"
    state_dim = 2
    control_dim = 1

    __slots__ = ("__inertia", "__gravity_coeff")
    __inertia: float
    __gravity_coeff: float

    def __init__(
        self,
        task_space: TaskSpace,
        inertia: float = 1.0,
        gravity_coeff: float = 1.0,
        state_bound: tuple[float, float] = (2.0 * math.pi, 20.0),
        control_bound: float = 10.0,
    ) -> None:
        if task_space.dims != 2:
            raise ConfigError(f"pendulum needs a 2-D task space (theta_goal, T_des), got {task_space.dims}-D")
        if inertia <= 0.0:
            raise ConfigError(f"pendulum inertia must be positive, got {inertia}")
        if task_space.lower[1] <= 0.0:
            raise ConfigError("pendulum durations must be positive")
        super().__init__(task_space, tuple(state_bound), control_bound)
        self.__inertia = float(inertia)
        self.__gravity_coeff = float(gravity_coeff)

    @property
    def inertia(self) -> float:
        return self.__inertia

    @property
    def gravity_coeff(self) -> float:
        return self.__gravity_coeff

    @override
    def dynamics(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        acc = (u[..., 0] - self.__gravity_coeff * np.sin(x[..., 0])) / self.__inertia
        return np.stack([x[..., 1], acc], axis=-1)

    @override
    def dynamics_jacobian(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        shape = x.shape[:-1]
        A = np.zeros(shape + (2, 2))
        A[..., 0, 1] = 1.0
        A[..., 1, 0] = -self.__gravity_coeff * np.cos(x[..., 0]) / self.__inertia
        B = np.zeros(shape + (2, 1))
        B[..., 1, 0] = 1.0 / self.__inertia
        return A, B

    @override
    def duration_bounds(self, task: Task) -> tuple[float, float]:
        return task[1], task[1]

    @override
    def terminal_targets(self, task: Task) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(2), np.array([task[0], 0.0])

    @override
    def initial_guess(self, task: Task, L_T: int) -> RawTrajectory:
        X, U, T = super().initial_guess(task, L_T)
        X[:, 1] = task[0] / T
        # 重力補償
        U[:, 0] = self.__gravity_coeff * np.sin(X[:, 0])
        return X, U, T

    @override
    def params(self) -> dict[str, Any]:
        return {"inertia": self.__inertia, "gravity_coeff": self.__gravity_coeff}


class DiscontinuousFamily(SystemSpec):
    """障害物回避つきの1次元二重積分器

    y(0) = y(T) = 0で静止した状態から静止した状態へ移動し、位相[window_start, window_end]の間は
    中心 −shift·τ、半径radiusの障害物を避けます。上下どちらを通っても局所最適なので、
    最適解はτ = 0を境に跳びます。"""

    name = "discontinuous_family"
    state_dim = 2
    control_dim = 1
    multi_basin = True

    __slots__ = ("__radius", "__shift", "__window", "__duration", "__margin")
    __radius: float
    __shift: float
    __window: tuple[float, float]
    __duration: float
    __margin: float

    def __init__(
        self,
        task_space: TaskSpace,
        radius: float = 0.5,
        shift: float = 0.4,
        window: tuple[float, float] = (0.4, 0.6),
        duration: float = 1.0,
        seed_margin: float = 0.1,
        state_bound: tuple[float, float] = (3.0, 20.0),
        control_bound: float = 200.0,
    ) -> None:
        if task_space.dims != 1:
            raise ConfigError(f"discontinuous_family needs a 1-D task space, got {task_space.dims}-D")
        w0, w1 = (float(x) for x in window)
        if not 0.0 < w0 < w1 < 1.0:
            raise ConfigError(f"obstacle window must satisfy 0 < start < end < 1, got {window}")
        if radius <= 0.0 or duration <= 0.0:
            raise ConfigError("obstacle radius and duration must be positive")
        super().__init__(task_space, tuple(state_bound), control_bound)
        self.__radius = float(radius)
        self.__shift = float(shift)
        self.__window = (w0, w1)
        self.__duration = float(duration)
        self.__margin = float(seed_margin)

    def obstacle_center(self, task: Task) -> float:
        return -self.__shift * task[0]

    @property
    def radius(self) -> float:
        return self.__radius

    def _window_mask(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return ((s >= self.__window[0] - 1e-12) & (s <= self.__window[1] + 1e-12)).astype(np.float64)

    @override
    def dynamics(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        return np.stack([x[..., 1], u[..., 0]], axis=-1)

    @override
    def dynamics_jacobian(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        shape = np.asarray(x).shape[:-1]
        A = np.zeros(shape + (2, 2))
        A[..., 0, 1] = 1.0
        B = np.zeros(shape + (2, 1))
        B[..., 1, 0] = 1.0
        return A, B

    @override
    def duration_bounds(self, task: Task) -> tuple[float, float]:
        return self.__duration, self.__duration

    @override
    def terminal_targets(self, task: Task) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(2), np.zeros(2)

    @property
    @override
    def n_path_ineq(self) -> int:
        return 1

    @override
    def path_ineq(self, task: Task, x: np.ndarray, u: np.ndarray, s: np.ndarray) -> np.ndarray:
        # 窓の外では0(常に満たす)
        y = np.asarray(x, dtype=np.float64)[:, 0]
        c = self.obstacle_center(task)
        return (self._window_mask(s) * (self.__radius**2 - (y - c) ** 2))[:, None]

    @override
    def path_ineq_jacobian(
        self, task: Task, x: np.ndarray, u: np.ndarray, s: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        Jx = np.zeros((n, 1, 2))
        Jx[:, 0, 0] = -2.0 * self._window_mask(s) * (x[:, 0] - self.obstacle_center(task))
        return Jx, np.zeros((n, 1, 1))

    def _bump_seed(self, height: float, L_T: int) -> RawTrajectory:
        T = self.__duration
        s = np.linspace(0.0, 1.0, L_T)
        # sin(πs)/sin(π·start)は窓の中で1以上になる
        scale = height / math.sin(math.pi * self.__window[0])
        y = scale * np.sin(math.pi * s)
        v = scale * math.pi / T * np.cos(math.pi * s)
        u = -scale * (math.pi / T) ** 2 * np.sin(math.pi * s)
        return np.stack([y, v], axis=1), u[:, None], T

    @override
    def basin_seeds(self, task: Task, L_T: int) -> list[RawTrajectory]:
        """障害物の上を通る初期値と下を通る初期値"""
        self.check_task(task)
        c = self.obstacle_center(task)
        above = c + self.__radius + self.__margin
        below = c - self.__radius - self.__margin
        return [self._bump_seed(above, L_T), self._bump_seed(below, L_T)]

    @override
    def initial_guess(self, task: Task, L_T: int) -> RawTrajectory:
        return self.basin_seeds(task, L_T)[0]

    @override
    def params(self) -> dict[str, Any]:
        return {
            "radius": self.__radius,
            "shift": self.__shift,
            "window": list(self.__window),
            "duration": self.__duration,
        }


_REGISTRY: dict[str, type[SystemSpec]] = {
    DoubleIntegrator.name: DoubleIntegrator,
    Pendulum.name: Pendulum,
    DiscontinuousFamily.name: DiscontinuousFamily,
}


def double_integrator_spec(task_space: TaskSpace, **params: Any) -> DoubleIntegrator:
    return DoubleIntegrator(task_space, **params)


def pendulum_spec(task_space: TaskSpace, **params: Any) -> Pendulum:
    return Pendulum(task_space, **params)


def discontinuous_family_spec(task_space: TaskSpace, **params: Any) -> DiscontinuousFamily:
    return DiscontinuousFamily(task_space, **params)


def double_integrator_oracle(d: float, T: float) -> OracleSolution:
    """最小エネルギー解 x(t) = d(3s² − 2s³)、u(t) = (6d/T²)(1 − 2t/T)、コスト12d²/T³"""
    if T <= 0.0:
        raise ValueError(f"duration must be positive, got {T}")

    def state_fn(t: np.ndarray) -> np.ndarray:
        s = np.asarray(t, dtype=np.float64) / T
        return np.stack([d * (3.0 * s**2 - 2.0 * s**3), d * (6.0 * s - 6.0 * s**2) / T], axis=-1)

    def control_fn(t: np.ndarray) -> np.ndarray:
        s = np.asarray(t, dtype=np.float64) / T
        return (6.0 * d / T**2 * (1.0 - 2.0 * s))[..., None]

    return OracleSolution(state_fn, control_fn, float(T), 12.0 * d**2 / T**3)


def simulate(spec: SystemSpec, x0: np.ndarray, controls: np.ndarray, T: float, substeps: int = 10) -> np.ndarray:
    """制御列を線形補間してRK4で再積分し、各ノードの状態を返します。"""
    U = np.asarray(controls, dtype=np.float64)
    L_T = U.shape[0]
    h = T / (L_T - 1) / substeps
    X = np.empty((L_T, spec.state_dim))
    X[0] = x = np.asarray(x0, dtype=np.float64)
    for k in range(L_T - 1):
        for j in range(substeps):
            a0 = j / substeps
            a1 = (j + 0.5) / substeps
            a2 = (j + 1) / substeps
            u0 = (1 - a0) * U[k] + a0 * U[k + 1]
            u1 = (1 - a1) * U[k] + a1 * U[k + 1]
            u2 = (1 - a2) * U[k] + a2 * U[k + 1]
            k1 = spec.dynamics(x, u0)
            k2 = spec.dynamics(x + 0.5 * h * k1, u1)
            k3 = spec.dynamics(x + 0.5 * h * k2, u1)
            k4 = spec.dynamics(x + h * k3, u2)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        X[k + 1] = x
    return X
