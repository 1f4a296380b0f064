import numpy as np
import pytest

from guidedtraj.approximator import (
    ApproximatorWeights,
    NetConfig,
    RegressionTarget,
    TrainConfig,
    build_network,
    consensus_points,
    error_statistics,
    fit,
    init_weights,
    norm_inf_error,
    predict,
    reconstruction_error,
)
from guidedtraj.errors import ConfigError, DimensionError
from guidedtraj.taskspace import TaskSet, TaskSpace, sample_uniform


def _cfg(**kwargs):
    base = dict(
        n_hidden=1,
        hidden_size=8,
        n_upsample=2,
        kernel_len=3,
        state_dim=2,
        seq_len=16,
        task_dim=1,
        task_lower=(0.5,),
        task_upper=(1.5,),
    )
    base.update(kwargs)
    return NetConfig(**base)


def test_zero_weights_predict_zero():
    w = ApproximatorWeights.zeros(_cfg())
    X, T = predict(w, [1.0])
    np.testing.assert_array_equal(X, np.zeros((16, 2)))
    assert T == 0.0


def test_output_shape_and_determinism():
    cfg = _cfg(n_upsample=5, kernel_len=5, hidden_size=64, seq_len=64)
    assert cfg.init_len == 2 and cfg.n_channels == 16
    w = init_weights(cfg, seed=4)
    tasks = np.array([[0.6], [1.0], [1.4]])
    X1, T1 = w.predict_batch(tasks)
    X2, T2 = init_weights(cfg, seed=4).predict_batch(tasks)
    assert X1.shape == (3, 64, 2) and T1.shape == (3,)
    np.testing.assert_array_equal(X1, X2)
    np.testing.assert_array_equal(T1, T2)


def test_uneven_sequence_length_is_cropped():
    cfg = _cfg(seq_len=50, n_upsample=3)
    assert cfg.out_len == 56
    X, _ = init_weights(cfg, 0).predict_batch(np.array([[1.0]]))
    assert X.shape == (1, 50, 2)


def test_layer_inventory():
    kinds = build_network(_cfg(n_upsample=3)).layer_inventory()
    assert kinds.count("upsample_nearest") == 3
    assert kinds.count("conv1d") == 4
    assert kinds[-1] == "dense"


@pytest.mark.parametrize(
    "kwargs", [{"n_upsample": 1}, {"kernel_len": 4}, {"task_lower": (1.0,), "task_upper": (0.0,)}, {"seq_len": 1}]
)
def test_invalid_net_config(kwargs):
    with pytest.raises(ConfigError):
        _cfg(**kwargs)


def test_task_dimension_checked():
    w = init_weights(_cfg(), 0)
    with pytest.raises(DimensionError):
        w.predict_batch(np.zeros((2, 3)))


def test_consensus_points_layout():
    w = init_weights(_cfg(), 1)
    tasks = np.array([[0.7], [1.3]])
    X, T = w.predict_batch(tasks)
    Z = consensus_points(w, tasks, 2.0)
    assert Z.shape == (2, 16 * 2 + 1)
    np.testing.assert_array_equal(Z[:, :-1], X.reshape(2, -1))
    np.testing.assert_array_equal(Z[:, -1], 2.0 * T)


def _targets_from(w, tasks, dX=0.0, dT=0.0, gamma=1.0):
    X, T = w.predict_batch(tasks)
    return [RegressionTarget(X[i] + dX, T[i] + dT, gamma) for i in range(len(tasks))]


def test_reconstruction_error_examples():
    w = init_weights(_cfg(), 2)
    tasks = np.array([[1.0]])
    X, T = w.predict_batch(tasks)
    bumped = X[0].copy()
    bumped[3, 1] += 2.0
    assert reconstruction_error(w, [RegressionTarget(bumped, T[0])], tasks) == pytest.approx(4.0)
    shifted = [RegressionTarget(X[0], T[0] + 3.0, gamma=2.0)]
    assert reconstruction_error(w, shifted, tasks) == pytest.approx(18.0)


def test_norm_inf_error():
    w = init_weights(_cfg(), 3)
    tasks = np.array([[0.8], [1.2]])
    np.testing.assert_allclose(norm_inf_error(w, _targets_from(w, tasks, dX=0.02), tasks), [0.02, 0.02])


def test_regression_target_validation():
    with pytest.raises(ValueError):
        RegressionTarget(np.full((4, 2), np.nan), 1.0)
    with pytest.raises(ValueError):
        RegressionTarget(np.zeros((4, 2)), 1.0, gamma=0.0)
    w = init_weights(_cfg(), 0)
    with pytest.raises(DimensionError):
        reconstruction_error(w, [RegressionTarget(np.zeros((4, 2)), 1.0)], np.array([[1.0]]))


def test_backward_matches_finite_differences():
    cfg = _cfg(n_hidden=2)
    net = build_network(cfg)
    w = init_weights(cfg, 5).flat.copy()
    w += np.random.default_rng(6).normal(scale=0.1, size=w.size)
    tasks = np.array([[0.6], [1.1], [1.45]])
    rng = np.random.default_rng(7)
    RX = rng.normal(size=(3, 16, 2))
    RT = rng.normal(size=3)

    def functional(flat):
        X, T, _ = net.forward(flat, tasks)
        return float((X * RX).sum() + (T * RT).sum())

    _, _, caches = net.forward(w, tasks)
    grad = net.backward(w, caches, RX, RT)
    step = 1e-5
    for k in rng.choice(w.size, size=25, replace=False):
        e = np.zeros_like(w)
        e[k] = step
        fd = (functional(w + e) - functional(w - e)) / (2.0 * step)
        assert abs(grad[k] - fd) <= 1e-5 * max(abs(grad[k]), abs(fd)) + 1e-8


def test_fit_learns_constant_trajectories():
    cfg = _cfg()
    tasks = sample_uniform(TaskSpace((0.5,), (1.5,)), 10, seed=0)
    X = np.tile([0.3, -0.2], (16, 1))
    targets = [RegressionTarget(X, 1.0) for _ in range(len(tasks))]
    report = fit(init_weights(cfg, 1), targets, tasks, TrainConfig(max_iter=500))
    assert report.final_error <= 1e-4 * report.initial_error
    assert reconstruction_error(report.weights, targets, tasks) == pytest.approx(report.final_error)


def test_fit_never_returns_worse_weights():
    cfg = _cfg()
    tasks = np.array([[0.6], [0.9], [1.3]])
    w0 = init_weights(cfg, 2)
    targets = _targets_from(w0, tasks, dX=0.5, dT=0.1)
    # 学習率が大きすぎても初期値より悪くはならない
    reckless = TrainConfig(optimizer="momentum", epochs=5, batch_size=2, learning_rate=50.0, cosine=False)
    report = fit(w0, targets, tasks, reckless)
    assert report.final_error <= report.initial_error


def test_zero_budget_returns_initial_weights():
    w0 = init_weights(_cfg(), 3)
    tasks = np.array([[1.0]])
    report = fit(w0, _targets_from(w0, tasks, dX=0.1), tasks, TrainConfig(max_iter=0))
    assert report.weights is w0
    assert report.iterations == 0


def test_momentum_training_reduces_error():
    cfg = _cfg()
    tasks = sample_uniform(TaskSpace((0.5,), (1.5,)), 16, seed=1)
    X = np.tile([0.1, 0.2], (16, 1))
    targets = [RegressionTarget(X, 1.0) for _ in range(len(tasks))]
    sgd = TrainConfig(optimizer="momentum", epochs=30, batch_size=4, learning_rate=1e-2, seed=5)
    report = fit(init_weights(cfg, 0), targets, tasks, sgd)
    assert report.final_error < report.initial_error


def test_invalid_train_config():
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="adam")
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)


@pytest.mark.slow
def test_fit_smooth_family():
    L_T = 32
    cfg = _cfg(seq_len=L_T, n_upsample=3, hidden_size=32)
    tasks = sample_uniform(TaskSpace((0.5,), (1.5,)), 200, seed=3)
    s = np.linspace(0.0, 1.0, L_T)
    targets = []
    for t in tasks:
        d = t[0]
        X = np.stack([d * (3 * s**2 - 2 * s**3), d * (6 * s - 6 * s**2)], axis=1)
        targets.append(RegressionTarget(X, 1.0))
    report = fit(init_weights(cfg, 0), targets, tasks, TrainConfig(max_iter=3000))
    assert norm_inf_error(report.weights, targets, tasks).mean() < 5e-3


def test_error_statistics():
    errors = np.array([0.005, 0.012, 0.02, 0.008])
    stats = error_statistics(errors)
    assert stats.n == 4
    assert stats.mean == pytest.approx(0.01125)
    assert stats.median == pytest.approx(0.01)
    assert stats.max == 0.02
    assert stats.exceedance == {0.01: 0.5, 0.015: 0.25}
    row = stats.to_row()
    assert row["threshold1"] == 0.01 and row["frac_gt_thresh2"] == 0.25
    with pytest.raises(ValueError):
        error_statistics([])


def test_taskset_inputs_accepted():
    cfg = _cfg()
    ts = TaskSet.from_array(np.array([0.7, 1.2]), TaskSpace((0.5,), (1.5,)))
    w = init_weights(cfg, 0)
    X, _ = w.predict_batch(ts)
    assert X.shape == (2, 16, 2)
