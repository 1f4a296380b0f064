import json

import pandas as pd
import pytest
import yaml

from guidedtraj import gtl
from guidedtraj.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_ERROR, EXIT_OK, main


def _tiny(**changes):
    data = {
        "system": {"name": "double_integrator"},
        "task_space": {"lower": [0.5, 0.8], "upper": [1.5, 1.2]},
        "L_T": 12,
        "n_holdout": 2,
        "net": {"n_hidden": 1, "hidden_size": 8, "n_upsample": 2, "kernel_len": 3},
        "solver": {"opt_tol": 1.0e-4},
        "train": {"max_iter": 30},
        "gtl": {"n_tasks": 6, "rho": 5.0, "max_iterations": 2, "stopping_tol": 0.0},
        "continuity": {"n_points": 4},
        "bounds": {
            "grid_n": 2,
            "mc_samples": 4,
            "gumbel_ns": [10, 20],
            "gumbel_replicates": 2,
            "probe": {"method": "grid", "grid_n": 2, "n_jacobian": 2},
        },
    }
    data.update(changes)
    return data


@pytest.fixture
def config(tmp_path):
    def write(**changes):
        path = tmp_path / "config.yml"
        path.write_text(yaml.safe_dump(_tiny(**changes)), encoding="utf-8")
        return str(path)

    return write


def _read(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_unknown_system_exit_code(tmp_path, config, capsys):
    out = tmp_path / "out"
    code = main(["solve", "--config", config(system={"name": "acrobot"}), "--out", str(out)])
    assert code == EXIT_CONFIG
    assert '"kind": "unknown_system"' in capsys.readouterr().err
    error = _read(out / "error.json")
    assert error["kind"] == "unknown_system" and error["exit_code"] == EXIT_CONFIG


def test_malformed_config_exit_code(tmp_path):
    bad = tmp_path / "bad.yml"
    bad.write_text("gtl: [1, 2\n", encoding="utf-8")
    assert main(["solve", "--config", str(bad), "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_bounds_without_checkpoint(tmp_path, config):
    out = tmp_path / "out"
    code = main(["bounds", "--config", config(), "--out", str(out), "--weights", str(tmp_path / "none.bin")])
    assert code == EXIT_CHECKPOINT
    assert _read(out / "error.json")["kind"] == "missing_checkpoint"


def test_solve_is_reproducible(tmp_path, config):
    cfg = config()
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["solve", "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["solve", "--config", cfg, "--out", str(b)]) == EXIT_OK
    assert len(list((a / "trajectories").glob("task_*.csv"))) == 6
    log = pd.read_csv(a / "run_log.csv")
    assert list(log["task_index"]) == list(range(6))
    manifest = _read(a / "manifest.json")
    assert "run_log.csv" in manifest["artifacts"]
    assert manifest["artifacts"] == _read(b / "manifest.json")["artifacts"]


def test_seed_changes_tasks(tmp_path, config):
    cfg = config()
    main(["solve", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["solve", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
    a = (tmp_path / "a" / "tasks.csv").read_text()
    b = (tmp_path / "b" / "tasks.csv").read_text()
    assert a != b


def test_gtl0_run(tmp_path, config):
    out = tmp_path / "out"
    assert main(["gtl0", "--config", config(), "--out", str(out)]) == EXIT_OK
    summary = _read(out / "summary.json")
    assert summary["mode"] == "gtl0" and summary["status"] in ("budget", "criterion")
    assert summary["trend_violations"] == []
    n = summary["iterations"]
    assert 1 <= n <= 2
    metrics = pd.read_csv(out / "metrics.csv")
    assert list(metrics["k"]) == list(range(n + 1))
    for k in range(n + 1):
        assert (out / "checkpoints" / f"iter_{k:03d}" / "weights.bin").is_file()
    assert (out / "checkpoints" / "final" / "weights.bin").is_file()
    assert len(pd.read_csv(out / "continuity.csv")) == 4
    assert _read(out / "manifest.json")["trend"] == {"monotone": True, "violations": []}

    assert main(["report", "--out", str(out), "--restrict", "0.9"]) == EXIT_OK
    assert _read(out / "report.json")["restrict"] == 0.9
    assert "report.csv" in _read(out / "manifest.json")["artifacts"]


def test_trend_violation_fails_the_run(tmp_path, config, monkeypatch):
    monkeypatch.setattr(gtl, "monotone_trend_violations", lambda history: [1])
    out = tmp_path / "out"
    assert main(["gtl0", "--config", config(), "--out", str(out)]) == EXIT_ERROR
    error = _read(out / "error.json")
    assert error["kind"] == "trend_violation" and error["iterations"] == [1]
    # 成果物は失敗しても残る
    assert (out / "metrics.csv").is_file()
    manifest = _read(out / "manifest.json")
    assert manifest["trend"] == {"monotone": False, "violations": [1]}


def test_trend_check_can_be_relaxed(tmp_path, config, monkeypatch):
    monkeypatch.setattr(gtl, "monotone_trend_violations", lambda history: [1])
    data = _tiny()["gtl"] | {"require_monotone_trend": False}
    out = tmp_path / "out"
    assert main(["gtl0", "--config", config(gtl=data), "--out", str(out)]) == EXIT_OK
    assert _read(out / "summary.json")["trend_violations"] == [1]


def test_gtl_needs_positive_alpha(tmp_path, config):
    out = tmp_path / "out"
    code = main(["gtl", "--config", config(), "--out", str(out)])
    assert code == EXIT_CONFIG
    assert _read(out / "error.json")["kind"] == "invalid_config"


def test_bounds_with_zero_radius(tmp_path, config):
    cfg = config()
    out = tmp_path / "out"
    assert main(["regress", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert len(pd.read_csv(out / "metrics.csv")) == 1
    assert main(["bounds", "--config", cfg, "--out", str(out), "--eps", "0"]) == EXIT_OK
    report = _read(out / "bounds.json")
    assert set(report["bound_i"]) == {"dynamics", "terminal", "duration"}
    assert all(v == 0.0 for v in report["bound_i"].values())
    assert len(pd.read_csv(out / "gumbel.csv")) == 2
