"""タスク空間。軸に平行な箱、一様サンプリング、被覆半径を扱います。"""

import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from typing import Final

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import gamma as gamma_fn

from guidedtraj._util import _as_vector
from guidedtraj.errors import DimensionError

logger = logging.getLogger(__name__)

# 境界判定の許容誤差
_BOX_TOL: Final = 1e-12

# 反復ごとの再サンプリングに使う乱数列の識別子
_RESAMPLE_STREAM: Final = 0x52534D50


@dataclass(frozen=True)
class TaskSpace:
    """タスク空間 D_τ。下限と上限の箱で表します。"""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        lo = tuple(float(x) for x in self.lower)
        hi = tuple(float(x) for x in self.upper)
        if len(lo) == 0 or len(lo) != len(hi):
            raise ValueError(f"lower and upper must be non-empty and of equal length ({len(lo)} vs {len(hi)})")
        for j, (a, b) in enumerate(zip(lo, hi)):
            if not (math.isfinite(a) and math.isfinite(b)):
                raise ValueError(f"task space bounds must be finite (axis {j})")
            if not a < b:
                raise ValueError(f"task space requires lower < upper on axis {j}, got [{a}, {b}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dims(self) -> int:
        return len(self.lower)

    @property
    def lower_array(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def upper_array(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower_array + self.upper_array)

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper_array - self.lower_array))

    def contains(self, coords: Sequence[float] | np.ndarray) -> bool:
        c = _as_vector(coords, self.dims, "task coordinates")
        return bool(np.all(c >= self.lower_array - _BOX_TOL) and np.all(c <= self.upper_array + _BOX_TOL))

    def normalize(self, coords: np.ndarray) -> np.ndarray:
        """座標を[-1, 1]^mに写します。最後の軸が次元です。"""
        c = np.asarray(coords, dtype=np.float64)
        if c.shape[-1] != self.dims:
            raise DimensionError(f"expected task dimension {self.dims}, got {c.shape[-1]}")
        return 2.0 * (c - self.lower_array) / (self.upper_array - self.lower_array) - 1.0

    def shrink(self, ratio: float) -> "TaskSpace":
        """中心を保ったまま各軸の幅をratio倍にした部分空間"""
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f"shrink ratio must be in (0, 1], got {ratio}")
        half = 0.5 * ratio * (self.upper_array - self.lower_array)
        return TaskSpace(tuple(self.center - half), tuple(self.center + half))

    def grid(self, n_per_axis: int) -> np.ndarray:
        """各軸n_per_axis点の格子。形状は(n_per_axis**m, m)です。"""
        if n_per_axis < 2:
            raise ValueError(f"grid needs at least 2 points per axis, got {n_per_axis}")
        axes = [np.linspace(a, b, n_per_axis) for a, b in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


@dataclass(frozen=True)
class Task:
    coords: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "coords", tuple(float(x) for x in self.coords))

    @property
    def dims(self) -> int:
        return len(self.coords)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.coords)

    def __getitem__(self, j: int) -> float:
        return self.coords[j]


@dataclass(frozen=True)
class TaskSet:
    """順序付きのタスク集合。インデックスiがGTL全体を通してτ_iを表します。"""

    tasks: tuple[Task, ...]
    seed: int
    space: TaskSpace

    def __post_init__(self) -> None:
        object.__setattr__(self, "tasks", tuple(self.tasks))
        for i, t in enumerate(self.tasks):
            if t.dims != self.space.dims:
                raise DimensionError(f"task {i} has dimension {t.dims}, space has {self.space.dims}")
            if not self.space.contains(t.coords):
                raise ValueError(f"task {i} {t.coords} lies outside the task space")

    @staticmethod
    def from_array(coords: np.ndarray, space: TaskSpace, seed: int = 0) -> "TaskSet":
        a = np.asarray(coords, dtype=np.float64)
        if a.ndim == 1:
            a = a[:, None]
        return TaskSet(tuple(Task(tuple(row)) for row in a), seed, space)

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    def __iter__(self) -> Iterator[Task]:
        return iter(self.tasks)

    def as_array(self) -> np.ndarray:
        if not self.tasks:
            return np.zeros((0, self.space.dims))
        return np.array([t.coords for t in self.tasks])

    def split(self, n_holdout: int) -> tuple["TaskSet", "TaskSet"]:
        """先頭を学習用、末尾n_holdout個を評価用に分けます。"""
        if not 0 <= n_holdout < len(self.tasks):
            raise ValueError(f"holdout size must be in [0, {len(self.tasks)}), got {n_holdout}")
        cut = len(self.tasks) - n_holdout
        return (
            TaskSet(self.tasks[:cut], self.seed, self.space),
            TaskSet(self.tasks[cut:], self.seed, self.space),
        )

    def select(self, indices: Sequence[int]) -> "TaskSet":
        return TaskSet(tuple(self.tasks[i] for i in indices), self.seed, self.space)

    def restrict_mask(self, sub: TaskSpace) -> np.ndarray:
        return np.array([sub.contains(t.coords) for t in self.tasks], dtype=bool)


def sample_uniform(space: TaskSpace, n: int, seed: int) -> TaskSet:
    """D_τ上の一様サンプルをn個生成します。"""
    if n < 1:
        raise ValueError(f"number of tasks must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    coords = rng.uniform(space.lower_array, space.upper_array, size=(n, space.dims))
    return TaskSet.from_array(coords, space, seed)


def resample_seed(base: int, iteration: int) -> int:
    """反復iterationで再サンプリングするときのシード

    (base, 識別子, iteration)から導くので、base + jのような連番のシード
    (評価用タスクなど)とは別の乱数列になります。"""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    seq = np.random.SeedSequence([base, _RESAMPLE_STREAM, iteration])
    return int(seq.generate_state(1, np.uint64)[0])


def covering_radius(ts: TaskSet | np.ndarray) -> float:
    """ε_N = max_i min_{j≠i} ‖τ_i − τ_j‖"""
    x = ts.as_array() if isinstance(ts, TaskSet) else np.asarray(ts, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError(f"covering radius needs at least 2 tasks, got {x.shape[0]}")
    _, idx = cKDTree(x).query(x, k=2)
    # 自分自身は距離0の最近傍として返るので、もう一方を隣とする
    self_first = idx[:, 0] == np.arange(x.shape[0])
    neighbor = np.where(self_first, idx[:, 1], idx[:, 0])
    d = np.sqrt(((x - x[neighbor]) ** 2).sum(axis=1))
    return float(d.max())


def gumbel_expectation_bound(n: int, m: int, beta: float) -> float:
    """E(ε_N) ≤ β (log N / N)^{1/m}"""
    if n < 2:
        raise ValueError(f"expectation bound needs n >= 2, got {n}")
    if m < 1:
        raise ValueError(f"dimension must be >= 1, got {m}")
    return beta * (math.log(n) / n) ** (1.0 / m)


def unit_ball_volume(m: int) -> float:
    return math.pi ** (m / 2) / float(gamma_fn(1 + m / 2))


def gumbel_statistic(eps: float, n: int, m: int) -> float:
    """N ω_m ε_N^m − log N。Nが大きいとき標準Gumbel分布に従います。"""
    return n * unit_ball_volume(m) * eps**m - math.log(n)


def mean_covering_radius(space: TaskSpace, n: int, replicates: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**32, size=replicates)
    values = [covering_radius(sample_uniform(space, n, int(s))) for s in seeds]
    return float(np.mean(values))


def fit_gumbel_beta(ns: Sequence[int], means: Sequence[float], m: int, margin: float = 1.0) -> float:
    """期待値の上界がすべての平均値を上回る最小のβにmarginを掛けた値"""
    if len(ns) != len(means) or not ns:
        raise ValueError("ns and means must be non-empty and aligned")
    ratios = [mu / gumbel_expectation_bound(n, m, 1.0) for n, mu in zip(ns, means)]
    beta = margin * max(ratios)
    logger.debug("fitted gumbel beta %.4f over N grid %s", beta, list(ns))
    return beta
