"""YAMLの実験設定

トップレベルの節はそれぞれ不変のデータクラスになり、未知のキーは ``ConfigError`` になります。
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Final, Self

import yaml

from guidedtraj._util import _canonical_json, _sha256_bytes
from guidedtraj.approximator import DEFAULT_THRESHOLDS, NetConfig, TrainConfig
from guidedtraj.bounds import DEFAULT_SLACK, ProbeConfig
from guidedtraj.errors import ConfigError, GuidedTrajError
from guidedtraj.gtl import CONTINUITY_NODE_FRACTION, GtlConfig
from guidedtraj.nlpsolver import SolverConfig
from guidedtraj.systems import SystemSpec
from guidedtraj.taskspace import TaskSpace

logger = logging.getLogger(__name__)

DEFAULT_GUMBEL_NS: Final = (50, 100, 200, 400, 800, 1600, 3200)


@dataclass(frozen=True)
class SystemConfig:
    name: str = "double_integrator"
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.params, dict):
            raise ConfigError("system.params must be a mapping")


@dataclass(frozen=True)
class TaskSpaceConfig:
    lower: tuple[float, ...] = (0.5,)
    upper: tuple[float, ...] = (1.5,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "lower", tuple(float(x) for x in self.lower))
        object.__setattr__(self, "upper", tuple(float(x) for x in self.upper))
        try:
            self.to_space()
        except ValueError as e:
            raise ConfigError(f"task_space: {e}") from e

    def to_space(self) -> TaskSpace:
        return TaskSpace(self.lower, self.upper)


@dataclass(frozen=True)
class NetSection:
    """ネットワークの構造。入出力の大きさは系とL_Tから決まります。"""

    n_hidden: int = 1
    hidden_size: int = 64
    n_upsample: int = 5
    kernel_len: int = 5

    def to_net_config(self, spec: SystemSpec, L_T: int) -> NetConfig:
        space = spec.task_space
        return NetConfig(
            n_hidden=self.n_hidden,
            hidden_size=self.hidden_size,
            n_upsample=self.n_upsample,
            kernel_len=self.kernel_len,
            state_dim=spec.state_dim,
            seq_len=L_T,
            task_dim=space.dims,
            task_lower=space.lower,
            task_upper=space.upper,
        )


@dataclass(frozen=True)
class SeedConfig:
    tasks: int = 0
    holdout: int = 1
    weights: int = 2
    training: int = 3

    @staticmethod
    def from_base(seed: int) -> "SeedConfig":
        return SeedConfig(seed, seed + 1, seed + 2, seed + 3)


@dataclass(frozen=True)
class ContinuityConfig:
    n_points: int = 41
    coord: int = 0
    node_fraction: float = CONTINUITY_NODE_FRACTION

    def __post_init__(self) -> None:
        if self.n_points < 2 or self.coord < 0 or not 0.0 <= self.node_fraction < 1.0:
            raise ConfigError(f"invalid continuity settings {self}")


@dataclass(frozen=True)
class BoundsConfig:
    # Noneなら学習タスクの被覆半径を使う
    eps: float | None = None
    grid_n: int = 32
    slack: float = DEFAULT_SLACK
    local: bool = False
    mc_samples: int = 1000
    gumbel_ns: tuple[int, ...] = DEFAULT_GUMBEL_NS
    gumbel_replicates: int = 20
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self) -> None:
        if isinstance(self.probe, dict):
            try:
                object.__setattr__(self, "probe", ProbeConfig(**self.probe))
            except TypeError as e:
                raise ConfigError(f"bounds.probe: {e}") from e
        object.__setattr__(self, "gumbel_ns", tuple(int(n) for n in self.gumbel_ns))
        if self.eps is not None and self.eps < 0.0:
            raise ConfigError(f"bounds.eps must be >= 0, got {self.eps}")
        if self.grid_n < 2 or self.mc_samples < 2 or self.gumbel_replicates < 1 or self.slack < 1.0:
            raise ConfigError(f"invalid bounds settings {self}")
        if any(n < 2 for n in self.gumbel_ns):
            raise ConfigError("gumbel_ns entries must be >= 2")


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    task_space: TaskSpaceConfig = field(default_factory=TaskSpaceConfig)
    L_T: int = 50
    # 評価用タスク数。Noneならn_tasks // 5
    n_holdout: int | None = None
    net: NetSection = field(default_factory=NetSection)
    solver: SolverConfig = field(default_factory=SolverConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gtl: GtlConfig = field(default_factory=GtlConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    continuity: ContinuityConfig = field(default_factory=ContinuityConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    thresholds: tuple[float, float] = DEFAULT_THRESHOLDS
    output_dir: str = "out"
    workers: int = 1

    def __post_init__(self) -> None:
        if self.L_T < 2:
            raise ConfigError(f"L_T must be >= 2, got {self.L_T}")
        if self.n_holdout is not None and self.n_holdout < 0:
            raise ConfigError(f"n_holdout must be >= 0, got {self.n_holdout}")
        th = tuple(float(t) for t in self.thresholds)
        if len(th) != 2 or any(t <= 0.0 for t in th):
            raise ConfigError(f"thresholds must be two positive values, got {self.thresholds}")
        object.__setattr__(self, "thresholds", th)
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.continuity.coord >= len(self.task_space.lower):
            raise ConfigError("continuity.coord is outside the task space")
        # 系の名前と引数はここで検証します
        self.build_system()

    @property
    def n_tasks(self) -> int:
        return self.gtl.n_tasks

    @property
    def holdout_size(self) -> int:
        return self.n_holdout if self.n_holdout is not None else self.gtl.n_tasks // 5

    def build_system(self) -> SystemSpec:
        return SystemSpec.create(self.system.name, self.task_space.to_space(), **self.system.params)

    def net_config(self, spec: SystemSpec | None = None) -> NetConfig:
        return self.net.to_net_config(spec or self.build_system(), self.L_T)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seeds.training)

    def with_overrides(
        self, seed: int | None = None, workers: int | None = None, output_dir: str | None = None
    ) -> Self:
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seeds"] = SeedConfig.from_base(seed)
        if workers is not None:
            changes["workers"] = workers
        if output_dir is not None:
            changes["output_dir"] = output_dir
        return dataclasses.replace(self, **changes) if changes else self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """解決済み設定の正規化JSONのSHA-256。出力先と並列数は結果に影響しないので含めません。"""
        d = self.to_dict()
        del d["output_dir"], d["workers"]
        return _sha256_bytes(_canonical_json(d).encode())

    @staticmethod
    def from_dict(data: dict[str, Any] | None) -> "ExperimentConfig":
        data = dict(data or {})
        _reject_unknown(ExperimentConfig, data, "config")
        kwargs: dict[str, Any] = {}
        sections: dict[str, type] = {
            "system": SystemConfig,
            "task_space": TaskSpaceConfig,
            "net": NetSection,
            "solver": SolverConfig,
            "train": TrainConfig,
            "gtl": GtlConfig,
            "seeds": SeedConfig,
            "continuity": ContinuityConfig,
            "bounds": BoundsConfig,
        }
        for key, value in data.items():
            cls = sections.get(key)
            kwargs[key] = _section(cls, value, key) if cls is not None else value
        if "thresholds" in kwargs:
            kwargs["thresholds"] = tuple(kwargs["thresholds"])
        try:
            return ExperimentConfig(**kwargs)
        except GuidedTrajError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @staticmethod
    def load(path: str | os.PathLike[str]) -> "ExperimentConfig":
        """YAMLファイルを読み込みます。失敗したらConfigErrorを送出します。"""
        try:
            with open(path, encoding="utf-8") as f:
                data = yaml.safe_load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {os.fspath(path)!r}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed YAML in {os.fspath(path)!r}: {e}") from e
        if data is not None and not isinstance(data, dict):
            raise ConfigError("the top level of a config file must be a mapping")
        cfg = ExperimentConfig.from_dict(data)
        logger.debug("loaded config %s (hash %s)", os.fspath(path), cfg.config_hash()[:12])
        return cfg

    @staticmethod
    def load_nothrow(path: str | os.PathLike[str]) -> tuple["ExperimentConfig | None", ConfigError | None]:
        try:
            return ExperimentConfig.load(path), None
        except ConfigError as e:
            return None, e


def _reject_unknown(cls: type, data: dict[str, Any], where: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _section(cls: type, value: Any, where: str) -> Any:
    if value is None:
        return cls()
    if not isinstance(value, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    _reject_unknown(cls, value, where)
    try:
        return cls(**value)
    except GuidedTrajError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e
