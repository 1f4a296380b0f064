"""成果物の読み書き。CSVはpandas、JSONはキーを整列して書きます。"""

import json
import logging
import os
import struct
import time
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Final

import numpy as np
import pandas as pd

from guidedtraj._util import _sha256_bytes
from guidedtraj.approximator import ApproximatorWeights, NetConfig
from guidedtraj.collocation import Trajectory
from guidedtraj.errors import CheckpointError, ConfigError
from guidedtraj.nlpsolver import SolveReport, SolverConfig
from guidedtraj.taskspace import Task, TaskSet, TaskSpace

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC: Final = b"GTLW"
MANIFEST_NAME: Final = "manifest.json"


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: str | os.PathLike[str], obj: Any) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dumps_json(obj), encoding="utf-8")
    return p


def read_json(path: str | os.PathLike[str]) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_csv(path: str | os.PathLike[str], frame: pd.DataFrame) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(p, index=False)
    return p


def file_sha256(path: str | os.PathLike[str]) -> str:
    return _sha256_bytes(Path(path).read_bytes())


# 重み


def save_weights(path: str | os.PathLike[str], w: ApproximatorWeights) -> Path:
    """magic、ヘッダ長(uint32 LE)、JSONヘッダ、float64 LEの並び"""
    header = {
        "net": w.config.to_dict(),
        "seed": w.seed,
        "n": w.n,
        "channels": list(w.config.channel_schedule),
        "task_lower": list(w.config.task_lower) if w.config.task_lower is not None else None,
        "task_upper": list(w.config.task_upper) if w.config.task_upper is not None else None,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(WEIGHTS_MAGIC + struct.pack("<I", len(hb)) + hb + w.flat.astype("<f8").tobytes())
    return p


def load_weights(path: str | os.PathLike[str]) -> ApproximatorWeights:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"weights checkpoint not found: {os.fspath(p)}")
    data = p.read_bytes()
    if data[:4] != WEIGHTS_MAGIC or len(data) < 8:
        raise CheckpointError(f"{os.fspath(p)} is not a weights checkpoint")
    (n_header,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8 : 8 + n_header].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header in {os.fspath(p)}") from e
    flat = np.frombuffer(data[8 + n_header :], dtype="<f8").astype(np.float64)
    if flat.shape[0] != header["n"]:
        raise CheckpointError(f"checkpoint {os.fspath(p)} holds {flat.shape[0]} weights, header says {header['n']}")
    return ApproximatorWeights(NetConfig.from_dict(header["net"]), flat, int(header["seed"]))


# タスク集合と軌道


def taskset_frame(ts: TaskSet) -> pd.DataFrame:
    a = ts.as_array()
    return pd.DataFrame({f"tau_{j}": a[:, j] for j in range(ts.space.dims)})


def save_taskset(path: str | os.PathLike[str], ts: TaskSet) -> list[Path]:
    p = Path(path)
    csv = write_csv(p, taskset_frame(ts))
    side = write_json(p.with_suffix(".json"), {"seed": ts.seed, "lower": list(ts.space.lower), "upper": list(ts.space.upper)})
    return [csv, side]


def load_taskset(path: str | os.PathLike[str]) -> TaskSet:
    p = Path(path)
    meta = read_json(p.with_suffix(".json"))
    frame = pd.read_csv(p)
    return TaskSet.from_array(frame.to_numpy(dtype=np.float64), TaskSpace(tuple(meta["lower"]), tuple(meta["upper"])), int(meta["seed"]))


def trajectory_frame(traj: Trajectory) -> pd.DataFrame:
    cols: dict[str, Any] = {"t": traj.times}
    for j in range(traj.states.shape[1]):
        cols[f"x_{j}"] = traj.states[:, j]
    for j in range(traj.controls.shape[1]):
        cols[f"u_{j}"] = traj.controls[:, j]
    return pd.DataFrame(cols)


def save_trajectory(path: str | os.PathLike[str], traj: Trajectory, task: Task, status: str | None = None) -> list[Path]:
    p = Path(path)
    csv = write_csv(p, trajectory_frame(traj))
    meta: dict[str, Any] = {"T": traj.duration, "task": list(task.coords), "L_T": traj.n_nodes}
    if status is not None:
        meta["status"] = status
    return [csv, write_json(p.with_suffix(".json"), meta)]


def load_trajectory(path: str | os.PathLike[str]) -> tuple[Trajectory, Task]:
    p = Path(path)
    meta = read_json(p.with_suffix(".json"))
    frame = pd.read_csv(p)
    X = frame[[c for c in frame.columns if c.startswith("x_")]].to_numpy(dtype=np.float64)
    U = frame[[c for c in frame.columns if c.startswith("u_")]].to_numpy(dtype=np.float64)
    return Trajectory(X, U, float(meta["T"])), Task(tuple(meta["task"]))


def run_log_frame(reports: Sequence[SolveReport], cfg: SolverConfig) -> pd.DataFrame:
    return pd.DataFrame([r.log_row(i, cfg) for i, r in enumerate(reports)])


# 出力ディレクトリ


class ArtifactStore:
    """出力ディレクトリへの書き込みを記録し、manifest.jsonを作ります。"""

    __slots__ = ("__root", "__files", "__timings", "__meta")
    __root: Path
    __files: set[str]
    __timings: dict[str, float]
    __meta: dict[str, Any]

    def __init__(self, root: str | os.PathLike[str]) -> None:
        self.__root = Path(root)
        try:
            self.__root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"output directory {os.fspath(root)!r} is not writable: {e}") from e
        self.__files = set()
        self.__timings = {}
        self.__meta = {}

    @property
    def root(self) -> Path:
        return self.__root

    @property
    def timings(self) -> dict[str, float]:
        return dict(self.__timings)

    def path(self, rel: str) -> Path:
        return self.__root / rel

    def _track(self, paths: Path | Sequence[Path]) -> None:
        for p in [paths] if isinstance(paths, Path) else paths:
            self.__files.add(p.relative_to(self.__root).as_posix())

    def write_csv(self, rel: str, frame: pd.DataFrame) -> Path:
        p = write_csv(self.path(rel), frame)
        self._track(p)
        return p

    def write_json(self, rel: str, obj: Any) -> Path:
        p = write_json(self.path(rel), obj)
        self._track(p)
        return p

    def save_weights(self, rel: str, w: ApproximatorWeights) -> Path:
        p = save_weights(self.path(rel), w)
        self._track(p)
        return p

    def save_taskset(self, rel: str, ts: TaskSet) -> None:
        self._track(save_taskset(self.path(rel), ts))

    def save_trajectory(self, rel: str, traj: Trajectory, task: Task, status: str | None = None) -> None:
        self._track(save_trajectory(self.path(rel), traj, task, status))

    def set_meta(self, key: str, value: Any) -> None:
        self.__meta[key] = value

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """段階の経過時間を記録します。"""
        logger.info("stage %s: start", name)
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.__timings[name] = time.perf_counter() - t0
            logger.info("stage %s: %.2f s", name, self.__timings[name])

    def hashes(self) -> dict[str, str]:
        return {rel: file_sha256(self.__root / rel) for rel in sorted(self.__files)}

    def write_manifest(self, config_hash: str, inputs_hash: str) -> Path:
        """manifest.json自身は成果物の一覧に含めません。"""
        hashes = self.hashes()
        manifest = {
            "config_hash": config_hash,
            "inputs_hash": inputs_hash,
            "artifacts": hashes,
            "timings": self.timings,
            **self.__meta,
        }
        p = write_json(self.__root / MANIFEST_NAME, manifest)
        logger.info("wrote %s with %d artifacts", p, len(hashes))
        return p
