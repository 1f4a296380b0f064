"""関数近似器。全結合の特徴ネットワークに1次元逆畳み込み(アップサンプル+畳み込み)を繋いだものです。

入力τ → tanh全結合×N_h → 線形で(N_ch, L_seq)の特徴 → N_up回の{最近傍×2アップサンプル,
同一パディング畳み込み, tanh} → 1×1畳み込みでp成分 → L_Tに切り詰め。所要時間は特徴から線形で読み出します。
逆伝播はすべて手書きです。
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Final, Literal, override

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import minimize

from guidedtraj.errors import ConfigError, DimensionError, DivergenceError
from guidedtraj.taskspace import Task, TaskSet

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS: Final = (0.01, 0.015)


@dataclass(frozen=True)
class NetConfig:
    n_hidden: int = 1
    hidden_size: int = 64
    n_upsample: int = 5
    kernel_len: int = 5
    state_dim: int = 2
    seq_len: int = 64
    task_dim: int = 1
    # 入力を[-1, 1]に正規化するための箱
    task_lower: tuple[float, ...] | None = None
    task_upper: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        for name in ("n_hidden", "hidden_size", "kernel_len", "state_dim", "seq_len", "task_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"NetConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.n_upsample < 2:
            raise ConfigError(f"NetConfig.n_upsample must be >= 2, got {self.n_upsample}")
        if self.kernel_len % 2 != 1:
            raise ConfigError(f"NetConfig.kernel_len must be odd for same padding, got {self.kernel_len}")
        if self.seq_len < 2:
            raise ConfigError(f"NetConfig.seq_len must be >= 2, got {self.seq_len}")
        if (self.task_lower is None) != (self.task_upper is None):
            raise ConfigError("task_lower and task_upper must be given together")
        if self.task_lower is not None:
            lo = tuple(float(x) for x in self.task_lower)
            hi = tuple(float(x) for x in self.task_upper)  # type: ignore[union-attr]
            if len(lo) != self.task_dim or len(hi) != self.task_dim or any(a >= b for a, b in zip(lo, hi)):
                raise ConfigError("task normalization box must match task_dim with lower < upper")
            object.__setattr__(self, "task_lower", lo)
            object.__setattr__(self, "task_upper", hi)

    @property
    def n_channels(self) -> int:
        return self.state_dim * 2 ** (self.n_upsample - 2)

    @property
    def init_len(self) -> int:
        return math.ceil(self.seq_len / 2**self.n_upsample)

    @property
    def out_len(self) -> int:
        return self.init_len * 2**self.n_upsample

    @property
    def channel_schedule(self) -> tuple[int, ...]:
        """各段の出力チャネル数。先頭は特徴のチャネル数N_chです。"""
        p, n = self.state_dim, self.n_upsample
        return (self.n_channels,) + tuple(p * 2 ** max(n - 2 - i, 0) for i in range(1, n + 1))

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_hidden": self.n_hidden,
            "hidden_size": self.hidden_size,
            "n_upsample": self.n_upsample,
            "kernel_len": self.kernel_len,
            "state_dim": self.state_dim,
            "seq_len": self.seq_len,
            "task_dim": self.task_dim,
            "task_lower": list(self.task_lower) if self.task_lower is not None else None,
            "task_upper": list(self.task_upper) if self.task_upper is not None else None,
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "NetConfig":
        d = dict(d)
        for k in ("task_lower", "task_upper"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return NetConfig(**d)


# 層


class Layer:
    """パラメータを持つ層は param_shapes を返し、平坦なベクトルの一部を使います。"""

    kind: str = "layer"
    __slots__ = ()

    def param_shapes(self) -> tuple[tuple[int, ...], ...]:
        return ()

    def fan_in(self) -> int:
        return 1

    def forward(self, params: Sequence[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(
        self, params: Sequence[np.ndarray], cache: Any, dy: np.ndarray
    ) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"
    __slots__ = ("n_in", "n_out")

    def __init__(self, n_in: int, n_out: int) -> None:
        self.n_in = n_in
        self.n_out = n_out

    @override
    def param_shapes(self) -> tuple[tuple[int, ...], ...]:
        return (self.n_out, self.n_in), (self.n_out,)

    @override
    def fan_in(self) -> int:
        return self.n_in

    @override
    def forward(self, params: Sequence[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, Any]:
        W, b = params
        return x @ W.T + b, x

    @override
    def backward(
        self, params: Sequence[np.ndarray], cache: Any, dy: np.ndarray
    ) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
        W, _ = params
        return dy @ W, (dy.T @ cache, dy.sum(axis=0))


class Conv1d(Layer):
    """ストライド1、同一パディングの1次元畳み込み。入力は(B, C_in, L)です。"""

    kind = "conv1d"
    __slots__ = ("c_in", "c_out", "k")

    def __init__(self, c_in: int, c_out: int, k: int) -> None:
        self.c_in = c_in
        self.c_out = c_out
        self.k = k

    @override
    def param_shapes(self) -> tuple[tuple[int, ...], ...]:
        return (self.c_out, self.c_in, self.k), (self.c_out,)

    @override
    def fan_in(self) -> int:
        return self.c_in * self.k

    @override
    def forward(self, params: Sequence[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, Any]:
        W, b = params
        pad = self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
        cols = sliding_window_view(xp, self.k, axis=2)
        y = np.einsum("bclk,ock->bol", cols, W) + b[None, :, None]
        return y, cols

    @override
    def backward(
        self, params: Sequence[np.ndarray], cache: Any, dy: np.ndarray
    ) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
        W, _ = params
        cols = cache
        B, _, L = dy.shape
        pad = self.k // 2
        dW = np.einsum("bclk,bol->ock", cols, dy)
        db = dy.sum(axis=(0, 2))
        dcols = np.einsum("ock,bol->bclk", W, dy)
        dxp = np.zeros((B, self.c_in, L + 2 * pad))
        for j in range(self.k):
            dxp[:, :, j : j + L] += dcols[..., j]
        return dxp[:, :, pad : pad + L], (dW, db)


class Upsample(Layer):
    """最近傍による×2アップサンプル"""

    kind = "upsample_nearest"
    __slots__ = ()

    @override
    def forward(self, params: Sequence[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, Any]:
        return np.repeat(x, 2, axis=2), None

    @override
    def backward(
        self, params: Sequence[np.ndarray], cache: Any, dy: np.ndarray
    ) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
        B, C, L2 = dy.shape
        return dy.reshape(B, C, L2 // 2, 2).sum(axis=3), ()


class Tanh(Layer):
    kind = "tanh"
    __slots__ = ()

    @override
    def forward(self, params: Sequence[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, Any]:
        y = np.tanh(x)
        return y, y

    @override
    def backward(
        self, params: Sequence[np.ndarray], cache: Any, dy: np.ndarray
    ) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
        return dy * (1.0 - cache**2), ()


# ネットワーク


class DeconvNet:
    """NetConfigから組み立てたネットワーク。重みは持たず、平坦なベクトルを受け取ります。"""

    __slots__ = ("__cfg", "__trunk", "__deconv", "__duration", "__offsets", "__n_params")
    __cfg: NetConfig
    __trunk: list[Layer]
    __deconv: list[Layer]
    __duration: Dense
    __offsets: dict[int, list[tuple[int, tuple[int, ...]]]]
    __n_params: int

    def __init__(self, cfg: NetConfig) -> None:
        self.__cfg = cfg
        trunk: list[Layer] = []
        n_in = cfg.task_dim
        for _ in range(cfg.n_hidden):
            trunk += [Dense(n_in, cfg.hidden_size), Tanh()]
            n_in = cfg.hidden_size
        trunk.append(Dense(n_in, cfg.n_channels * cfg.init_len))
        sched = cfg.channel_schedule
        deconv: list[Layer] = []
        for i in range(1, cfg.n_upsample + 1):
            deconv += [Upsample(), Conv1d(sched[i - 1], sched[i], cfg.kernel_len), Tanh()]
        deconv.append(Conv1d(sched[-1], cfg.state_dim, 1))
        self.__trunk = trunk
        self.__deconv = deconv
        self.__duration = Dense(n_in, 1)

        offsets: dict[int, list[tuple[int, tuple[int, ...]]]] = {}
        pos = 0
        for layer in self.layers:
            entries = []
            for shape in layer.param_shapes():
                entries.append((pos, shape))
                pos += math.prod(shape)
            offsets[id(layer)] = entries
        self.__offsets = offsets
        self.__n_params = pos

    @property
    def config(self) -> NetConfig:
        return self.__cfg

    @property
    def layers(self) -> list[Layer]:
        return self.__trunk + self.__deconv + [self.__duration]

    @property
    def n_params(self) -> int:
        return self.__n_params

    def layer_inventory(self) -> list[str]:
        return [layer.kind for layer in self.layers]

    def params_of(self, layer: Layer, flat: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(flat[o : o + math.prod(s)].reshape(s) for o, s in self.__offsets[id(layer)])

    def _scatter(self, layer: Layer, grads: tuple[np.ndarray, ...], out: np.ndarray) -> None:
        for (o, s), g in zip(self.__offsets[id(layer)], grads):
            out[o : o + math.prod(s)] += g.ravel()

    def init_flat(self, seed: int) -> np.ndarray:
        """fan-inで尺度を決めた一様乱数。バイアスは0です。"""
        rng = np.random.default_rng(seed)
        flat = np.zeros(self.__n_params)
        for layer in self.layers:
            entries = self.__offsets[id(layer)]
            if not entries:
                continue
            (o, s) = entries[0]
            limit = 1.0 / math.sqrt(layer.fan_in())
            flat[o : o + math.prod(s)] = rng.uniform(-limit, limit, size=math.prod(s))
        return flat

    def normalize_input(self, tasks: np.ndarray) -> np.ndarray:
        x = np.asarray(tasks, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.__cfg.task_dim:
            raise DimensionError(f"network expects {self.__cfg.task_dim}-D tasks, got {x.shape[-1]}-D")
        cfg = self.__cfg
        if cfg.task_lower is None:
            return x
        lo = np.array(cfg.task_lower)
        hi = np.array(cfg.task_upper)
        return 2.0 * (x - lo) / (hi - lo) - 1.0

    def forward(self, flat: np.ndarray, tasks: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[Any]]:
        """(状態列(B, L_T, p), 所要時間(B,), キャッシュ)"""
        cfg = self.__cfg
        h = self.normalize_input(tasks)
        caches: list[Any] = []
        feat = h
        for i, layer in enumerate(self.__trunk):
            if i == len(self.__trunk) - 1:
                feat = h
            h, c = layer.forward(self.params_of(layer, flat), h)
            caches.append(c)
        a = h.reshape(h.shape[0], cfg.n_channels, cfg.init_len)
        for layer in self.__deconv:
            a, c = layer.forward(self.params_of(layer, flat), a)
            caches.append(c)
        T, c = self.__duration.forward(self.params_of(self.__duration, flat), feat)
        caches.append(c)
        X = a[:, :, : cfg.seq_len].transpose(0, 2, 1)
        return X, T[:, 0], caches

    def backward(self, flat: np.ndarray, caches: list[Any], dX: np.ndarray, dT: np.ndarray) -> np.ndarray:
        cfg = self.__cfg
        grad = np.zeros(self.__n_params)
        B = dX.shape[0]
        da = np.zeros((B, cfg.state_dim, cfg.out_len))
        da[:, :, : cfg.seq_len] = dX.transpose(0, 2, 1)
        n_trunk = len(self.__trunk)
        for j in range(len(self.__deconv) - 1, -1, -1):
            layer = self.__deconv[j]
            da, g = layer.backward(self.params_of(layer, flat), caches[n_trunk + j], da)
            self._scatter(layer, g, grad)
        dh = da.reshape(B, cfg.n_channels * cfg.init_len)
        dfeat, g = self.__duration.backward(self.params_of(self.__duration, flat), caches[-1], dT[:, None])
        self._scatter(self.__duration, g, grad)
        for j in range(n_trunk - 1, -1, -1):
            layer = self.__trunk[j]
            dh, g = layer.backward(self.params_of(layer, flat), caches[j], dh)
            self._scatter(layer, g, grad)
            if j == n_trunk - 1:
                # 所要時間の読み出しは最後の線形層と同じ入力を使う
                dh = dh + dfeat
        return grad


@lru_cache(maxsize=32)
def build_network(cfg: NetConfig) -> DeconvNet:
    return DeconvNet(cfg)


@dataclass(frozen=True)
class ApproximatorWeights:
    """ネットワークの全パラメータWと初期化の乱数シード"""

    config: NetConfig
    flat: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        w = np.array(self.flat, dtype=np.float64)
        n = build_network(self.config).n_params
        if w.shape != (n,):
            raise DimensionError(f"weights must have shape ({n},), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "flat", w)

    @property
    def n(self) -> int:
        return self.flat.shape[0]

    @property
    def network(self) -> DeconvNet:
        return build_network(self.config)

    @staticmethod
    def zeros(cfg: NetConfig) -> "ApproximatorWeights":
        return ApproximatorWeights(cfg, np.zeros(build_network(cfg).n_params), 0)

    def with_flat(self, flat: np.ndarray) -> "ApproximatorWeights":
        return ApproximatorWeights(self.config, flat, self.seed)

    def predict_batch(self, tasks: TaskSet | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = tasks.as_array() if isinstance(tasks, TaskSet) else tasks
        X, T, _ = self.network.forward(self.flat, x)
        return X, T


def init_weights(cfg: NetConfig, seed: int) -> ApproximatorWeights:
    return ApproximatorWeights(cfg, build_network(cfg).init_flat(seed), seed)


def predict(w: ApproximatorWeights, task: Task | Sequence[float] | np.ndarray) -> tuple[np.ndarray, float]:
    """1タスクの予測 (X̂(τ, W), T̂(τ, W))"""
    coords = task.array if isinstance(task, Task) else np.asarray(task, dtype=np.float64)
    if coords.ndim != 1:
        raise DimensionError(f"a single task must be a vector, got shape {coords.shape}")
    X, T = w.predict_batch(coords[None, :])
    return X[0], float(T[0])


def consensus_points(w: ApproximatorWeights, tasks: TaskSet | np.ndarray, gamma: float) -> np.ndarray:
    """Z_i = (X̂(τ_i, W), γT̂(τ_i, W))。形状は(N, L_T·p + 1)です。"""
    X, T = w.predict_batch(tasks)
    return np.concatenate([X.reshape(X.shape[0], -1), gamma * T[:, None]], axis=1)


# 回帰


@dataclass(frozen=True)
class RegressionTarget:
    """1タスク分の回帰目標。乗数でずらした値でも構いません。"""

    states: np.ndarray
    duration: float
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        X = np.array(self.states, dtype=np.float64)
        if X.ndim != 2 or not np.all(np.isfinite(X)) or not math.isfinite(self.duration):
            raise ValueError("regression targets must be finite (L_T, p) states and a finite duration")
        X.setflags(write=False)
        object.__setattr__(self, "states", X)
        object.__setattr__(self, "duration", float(self.duration))


def _stack(targets: Sequence[RegressionTarget], tasks: TaskSet | np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    x = tasks.as_array() if isinstance(tasks, TaskSet) else np.asarray(tasks, dtype=np.float64)
    if len(targets) != x.shape[0]:
        raise DimensionError(f"{len(targets)} targets for {x.shape[0]} tasks")
    if not targets:
        raise ValueError("at least one regression target is required")
    gammas = {t.gamma for t in targets}
    if len(gammas) != 1:
        raise ValueError("all regression targets must share the same gamma")
    Xs = np.stack([t.states for t in targets])
    Ts = np.array([t.duration for t in targets])
    return x, Xs, Ts, gammas.pop()


def _residuals(w_flat: np.ndarray, net: DeconvNet, x: np.ndarray, Xs: np.ndarray, Ts: np.ndarray):
    Xh, Th, caches = net.forward(w_flat, x)
    if Xh.shape != Xs.shape:
        raise DimensionError(f"target states have shape {Xs.shape[1:]}, network predicts {Xh.shape[1:]}")
    return Xs - Xh, Ts - Th, caches


def reconstruction_error(
    w: ApproximatorWeights, targets: Sequence[RegressionTarget], tasks: TaskSet | np.ndarray
) -> float:
    """R_γ = Σ ‖X_i − X̂(τ_i, W)‖²_F + γ (T_i − T̂(τ_i, W))²"""
    x, Xs, Ts, gamma = _stack(targets, tasks)
    rX, rT, _ = _residuals(w.flat, w.network, x, Xs, Ts)
    return float((rX**2).sum() + gamma * (rT**2).sum())


def norm_inf_error(
    w: ApproximatorWeights, targets: Sequence[RegressionTarget], tasks: TaskSet | np.ndarray
) -> np.ndarray:
    """タスクごとの max_{t, j} |X_i − X̂(τ_i, W)|"""
    x, Xs, Ts, _ = _stack(targets, tasks)
    rX, _, _ = _residuals(w.flat, w.network, x, Xs, Ts)
    return np.abs(rX).reshape(rX.shape[0], -1).max(axis=1)


@dataclass(frozen=True)
class ErrorStatistics:
    n: int
    mean: float
    median: float
    mode: float
    max: float
    exceedance: dict[float, float]

    def to_row(self) -> dict[str, float]:
        row: dict[str, float] = {
            "n": self.n,
            "mean": self.mean,
            "median": self.median,
            "mode": self.mode,
            "max": self.max,
        }
        for i, (thr, frac) in enumerate(sorted(self.exceedance.items()), start=1):
            row[f"threshold{i}"] = thr
            row[f"frac_gt_thresh{i}"] = frac
        return row


def error_statistics(
    errors: Sequence[float] | np.ndarray, thresholds: Sequence[float] = DEFAULT_THRESHOLDS, bins: int = 50
) -> ErrorStatistics:
    """平均、中央値、ヒストグラムの山による最頻値、閾値超過率"""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors to summarize")
    counts, edges = np.histogram(e, bins=bins)
    k = int(np.argmax(counts))
    return ErrorStatistics(
        n=int(e.size),
        mean=float(e.mean()),
        median=float(np.median(e)),
        mode=float(0.5 * (edges[k] + edges[k + 1])),
        max=float(e.max()),
        exceedance={float(t): float(np.mean(e > t)) for t in thresholds},
    )


@dataclass(frozen=True)
class TrainConfig:
    optimizer: Literal["lbfgs", "momentum"] = "lbfgs"
    # momentum
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-2
    lr_min: float = 1e-4
    momentum: float = 0.9
    cosine: bool = True
    # エポック間の全バッチ損失の許容増加率。超えたらそのエポックを捨てて学習率を半分にする
    loss_slack: float = 1e-3
    # lbfgs
    max_iter: int = 2000
    maxcor: int = 20
    ftol: float = 1e-15
    gtol: float = 1e-10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.optimizer not in ("lbfgs", "momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.max_iter < 0 or self.batch_size < 1:
            raise ConfigError("epochs/max_iter must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0.0 or self.lr_min < 0.0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("invalid learning-rate schedule")
        if self.loss_slack < 0.0:
            raise ConfigError("loss_slack must be >= 0")

    @property
    def budget(self) -> int:
        return self.max_iter if self.optimizer == "lbfgs" else self.epochs


@dataclass(frozen=True)
class TrainReport:
    weights: ApproximatorWeights
    losses: tuple[float, ...]
    initial_error: float
    final_error: float
    iterations: int


class _Objective:
    """平均二乗誤差と勾配"""

    __slots__ = ("net", "x", "Xs", "Ts", "gamma", "n_total")

    def __init__(self, net: DeconvNet, x: np.ndarray, Xs: np.ndarray, Ts: np.ndarray, gamma: float) -> None:
        self.net = net
        self.x = x
        self.Xs = Xs
        self.Ts = Ts
        self.gamma = gamma
        self.n_total = x.shape[0]

    def sum_loss(self, flat: np.ndarray, idx: np.ndarray | None = None) -> float:
        x, Xs, Ts = self._batch(idx)
        rX, rT, _ = _residuals(flat, self.net, x, Xs, Ts)
        return float((rX**2).sum() + self.gamma * (rT**2).sum())

    def mean_loss_and_grad(self, flat: np.ndarray, idx: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        x, Xs, Ts = self._batch(idx)
        rX, rT, caches = _residuals(flat, self.net, x, Xs, Ts)
        n = x.shape[0]
        loss = float((rX**2).sum() + self.gamma * (rT**2).sum()) / n
        if not math.isfinite(loss):
            raise DivergenceError(f"training loss became non-finite ({loss})")
        grad = self.net.backward(flat, caches, -2.0 * rX / n, -2.0 * self.gamma * rT / n)
        return loss, grad

    def _batch(self, idx: np.ndarray | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if idx is None:
            return self.x, self.Xs, self.Ts
        return self.x[idx], self.Xs[idx], self.Ts[idx]


def _cosine_lr(cfg: TrainConfig, epoch: int) -> float:
    if not cfg.cosine or cfg.epochs <= 1:
        return cfg.learning_rate
    return cfg.lr_min + 0.5 * (cfg.learning_rate - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1)))


def _fit_momentum(obj: _Objective, w0: np.ndarray, cfg: TrainConfig, losses: list[float]) -> tuple[np.ndarray, int]:
    rng = np.random.default_rng(cfg.seed)
    w = w0.copy()
    vel = np.zeros_like(w)
    prev = losses[-1]
    scale = 1.0
    for epoch in range(cfg.epochs):
        lr = scale * _cosine_lr(cfg, epoch)
        w_start = w.copy()
        order = rng.permutation(obj.n_total)
        for start in range(0, obj.n_total, cfg.batch_size):
            _, g = obj.mean_loss_and_grad(w, order[start : start + cfg.batch_size])
            vel = cfg.momentum * vel - lr * g
            w = w + vel
        loss = obj.sum_loss(w)
        if not math.isfinite(loss):
            raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
        if loss > (1.0 + cfg.loss_slack) * prev:
            w = w_start
            vel = np.zeros_like(w)
            scale *= 0.5
            logger.debug("epoch %d rejected (loss %.4e > %.4e), step scale %.3g", epoch, loss, prev, scale)
            continue
        losses.append(loss)
        prev = loss
        logger.debug("epoch %d: loss %.6e lr %.3e", epoch, loss, lr)
    return w, cfg.epochs


def _fit_lbfgs(obj: _Objective, w0: np.ndarray, cfg: TrainConfig, losses: list[float]) -> tuple[np.ndarray, int]:
    best = {"loss": math.inf, "w": w0}

    def fun(w: np.ndarray) -> tuple[float, np.ndarray]:
        loss, g = obj.mean_loss_and_grad(w)
        if loss < best["loss"]:
            best["loss"] = loss
            best["w"] = w.copy()
        return loss, g

    def callback(xk: np.ndarray) -> None:
        losses.append(obj.sum_loss(xk))

    res = minimize(
        fun,
        w0,
        jac=True,
        method="L-BFGS-B",
        callback=callback,
        options={"maxiter": cfg.max_iter, "maxcor": cfg.maxcor, "ftol": cfg.ftol, "gtol": cfg.gtol},
    )
    logger.debug("lbfgs training: %s after %d iterations", res.message, res.nit)
    return best["w"], int(res.nit)


def fit(
    w0: ApproximatorWeights, targets: Sequence[RegressionTarget], tasks: TaskSet | np.ndarray, cfg: TrainConfig
) -> TrainReport:
    """R_γを最小化します。戻り値の誤差はw0の誤差を超えません。"""
    x, Xs, Ts, gamma = _stack(targets, tasks)
    obj = _Objective(w0.network, x, Xs, Ts, gamma)
    initial = obj.sum_loss(w0.flat)
    if not math.isfinite(initial):
        raise DivergenceError("initial training loss is non-finite")
    losses = [initial]
    if cfg.budget == 0:
        return TrainReport(w0, tuple(losses), initial, initial, 0)
    if cfg.optimizer == "momentum":
        flat, iterations = _fit_momentum(obj, np.array(w0.flat), cfg, losses)
    else:
        flat, iterations = _fit_lbfgs(obj, np.array(w0.flat), cfg, losses)
    final = obj.sum_loss(flat)
    if not final <= initial:
        flat, final = np.array(w0.flat), initial
    logger.info("training (%s): R %.4e -> %.4e in %d iterations", cfg.optimizer, initial, final, iterations)
    return TrainReport(w0.with_flat(flat), tuple(losses), initial, final, iterations)


def train(
    w0: ApproximatorWeights, targets: Sequence[RegressionTarget], tasks: TaskSet | np.ndarray, cfg: TrainConfig
) -> ApproximatorWeights:
    return fit(w0, targets, tasks, cfg).weights
