import math

import numpy as np
import pytest

from guidedtraj.approximator import NetConfig, TrainConfig, init_weights
from guidedtraj.bounds import (
    CallableSource,
    LipschitzEstimates,
    ProbeConfig,
    SolvedTrajectorySource,
    WeightsSource,
    as_source,
    bounds_report,
    constraint_violations,
    estimate_lipschitz,
    gumbel_curve,
    mc_cost_integral,
    recover_controls,
    violation_bound,
    violation_measured,
)
from guidedtraj.errors import ConfigError
from guidedtraj.gtl import GtlConfig, GuidedTrajectoryLearner
from guidedtraj.systems import double_integrator_oracle
from guidedtraj.taskspace import Task, TaskSpace, covering_radius, sample_uniform


def test_mc_constant_integrand(unit_interval):
    est = mc_cost_integral(lambda t: np.full(t.shape[0], 3.0), unit_interval, 100, seed=0)
    assert est.integral == 3.0
    assert est.variance == 0.0
    assert est.n == 100


def test_mc_uses_box_volume():
    space = TaskSpace((0.0, 0.0), (2.0, 0.5))
    est = mc_cost_integral(lambda t: np.ones(t.shape[0]), space, 10, seed=0)
    assert est.integral == pytest.approx(1.0)


def test_mc_linear_integrand(unit_interval):
    est = mc_cost_integral(lambda t: t[:, 0], unit_interval, 10_000, seed=1)
    assert abs(est.integral - 0.5) < 0.02


def test_mc_variance_decays_as_one_over_n(unit_interval):
    ns = np.array([100, 1000, 10_000])
    var = [mc_cost_integral(lambda t: t[:, 0] ** 2, unit_interval, int(n), seed=2).variance for n in ns]
    slope = np.polyfit(np.log(ns), np.log(var), 1)[0]
    assert abs(slope + 1.0) < 0.15


def test_mc_is_unbiased(unit_interval):
    runs = [mc_cost_integral(lambda t: t[:, 0] ** 2, unit_interval, 1000, seed=s) for s in range(100)]
    mean = np.mean([r.integral for r in runs])
    spread = math.sqrt(np.mean([r.variance for r in runs]))
    assert abs(mean - 1.0 / 3.0) < 3.0 * spread


def test_mc_needs_two_samples(unit_interval):
    with pytest.raises(ValueError):
        mc_cost_integral(lambda t: t[:, 0], unit_interval, 1, seed=0)


def test_mc_trajectory_cost_of_oracle(di_space, di_spec):
    L_T = 30

    def oracle(tau):
        trajs = [double_integrator_oracle(d, T).sample(L_T) for d, T in tau]
        return (
            np.stack([t.states for t in trajs]),
            np.array([t.duration for t in trajs]),
            np.stack([t.controls for t in trajs]),
        )

    est = mc_cost_integral(oracle, di_space, 20, seed=3, spec=di_spec, L_T=L_T)
    rng = np.random.default_rng(3)
    tau = rng.uniform(di_space.lower_array, di_space.upper_array, size=(20, 2))
    costs = []
    for d, T in tau:
        U = double_integrator_oracle(d, T).sample(L_T).controls
        costs.append(T / L_T * float((U**2).sum()))
    assert est.integral == pytest.approx(di_space.volume * np.mean(costs), rel=1e-9)


def test_as_source():
    w = init_weights(NetConfig(hidden_size=8, n_upsample=2, kernel_len=3, seq_len=8, task_dim=1), 0)
    assert isinstance(as_source(w), WeightsSource)
    assert isinstance(as_source(lambda t: (t, t)), CallableSource)
    with pytest.raises(TypeError):
        as_source(42)


def _affine_source(A, slope, offset):
    def fn(tau):
        t = tau[:, 0]
        return t[:, None, None] * A[None], slope * t + offset

    return fn


def test_lipschitz_of_affine_family(unit_interval):
    A = np.random.default_rng(4).normal(size=(6, 2))
    lip = estimate_lipschitz(_affine_source(A, 2.0, 1.0), unit_interval, ProbeConfig(n_probes=16))
    assert lip.K == pytest.approx(np.linalg.norm(A), rel=1e-6)
    assert lip.L_dur == pytest.approx(2.0, rel=1e-6)
    assert lip.m == {}
    assert lip.n_pairs == 16 * 15 // 2


def test_lipschitz_of_constant_family(unit_interval):
    lip = estimate_lipschitz(_affine_source(np.zeros((6, 2)), 0.0, 1.0), unit_interval, ProbeConfig(method="grid"))
    assert lip.K == 0.0 and lip.L_dur == 0.0
    # 格子では隣同士の組だけ
    assert lip.n_pairs == 8


def test_local_constants_do_not_exceed_global(unit_interval):
    def curved(tau):
        t = tau[:, 0]
        return np.stack([np.sin(3 * t), t**2], axis=1)[:, None, :], np.exp(t)

    lip = estimate_lipschitz(curved, unit_interval, ProbeConfig(n_probes=40, local_eps=0.05))
    assert lip.K_local <= lip.K
    assert lip.L_dur_local <= lip.L_dur
    far = estimate_lipschitz(curved, unit_interval, ProbeConfig(n_probes=4, local_eps=0.0))
    assert far.K_local == far.K


def test_lipschitz_validation():
    with pytest.raises(ValueError):
        LipschitzEstimates(K=math.inf, L_dur=0.0, m={}, method="pairwise", K_local=0.0, L_dur_local=0.0)
    with pytest.raises(ConfigError):
        ProbeConfig(method="sobol")


def test_violation_bound_example():
    lip = LipschitzEstimates(K=1.0, L_dur=0.5, m={"dynamics": 2.0}, method="pairwise", K_local=1.0, L_dur_local=0.5)
    assert violation_bound(lip, 0.1).bounds["dynamics"] == pytest.approx(0.5)
    assert violation_bound(lip, 0.0).bounds["dynamics"] == 0.0
    with pytest.raises(ValueError):
        violation_bound(lip, -0.1)


def test_violation_bound_is_monotone():
    rng = np.random.default_rng(5)
    for _ in range(20):
        K, L, m, e1, e2 = rng.uniform(0.0, 5.0, size=5)
        lip = LipschitzEstimates(K=K, L_dur=L, m={"terminal": m}, method="pairwise", K_local=K, L_dur_local=L)
        lo, hi = sorted((e1, e2))
        assert violation_bound(lip, lo).bounds["terminal"] <= violation_bound(lip, hi).bounds["terminal"]


def test_local_bound_uses_local_constants():
    lip = LipschitzEstimates(K=3.0, L_dur=1.0, m={"dynamics": 1.0}, method="pairwise", K_local=1.0, L_dur_local=0.0)
    assert violation_bound(lip, 0.5, local=True).bounds["dynamics"] == pytest.approx(1.0)
    assert violation_bound(lip, 0.5).bounds["dynamics"] == pytest.approx(2.5)


def test_recover_controls_for_oracle_states(di_spec):
    L_T = 25
    traj = double_integrator_oracle(1.0, 1.0).sample(L_T)
    task = Task((1.0, 1.0))
    U = recover_controls(di_spec, task, L_T, traj.states, 1.0)
    groups = constraint_violations(di_spec, task, L_T, traj.states, U, 1.0)
    # 速度の欠損は入力で消せる。位置の欠損h²は残る
    assert groups["dynamics"].reshape(-1, 2)[:, 1].max() < 1e-8
    assert groups["dynamics"].max() == pytest.approx(1.0 / 24**2, rel=1e-6)
    np.testing.assert_array_equal(groups["duration"], [0.0, 0.0])


def test_duration_violation(di_spec):
    traj = double_integrator_oracle(1.0, 1.0).sample(10)
    groups = constraint_violations(di_spec, Task((1.0, 0.9)), 10, traj.states, traj.controls, 1.0)
    np.testing.assert_allclose(groups["duration"], [0.0, 0.1])


def test_perfectly_fitted_model_is_dominated(di_space, di_spec, solver_cfg):
    L_T = 12
    source = SolvedTrajectorySource(di_spec, L_T, solver_cfg)
    measured = violation_measured(source, di_spec, di_space, 2, L_T)
    assert measured.tasks.shape == (4, 2)
    assert max(measured.maxima.values()) <= solver_cfg.feas_tol
    frame = measured.frame()
    assert list(frame.columns) == ["tau_0", "tau_1", "dynamics", "terminal", "duration", "max"]

    lip = estimate_lipschitz(source, di_space, ProbeConfig(method="grid", grid_n=2, n_jacobian=2), di_spec, L_T)
    assert set(lip.m) == {"dynamics", "terminal", "duration"}
    bound = violation_bound(lip, 0.05)
    report = bounds_report(lip, bound, measured, atol=solver_cfg.feas_tol)
    assert all(report["dominated"].values())
    assert set(report["bound_i"]) == {"dynamics", "terminal", "duration"}


def test_gumbel_curve(unit_interval):
    curve = gumbel_curve(unit_interval, [20, 40], replicates=3, seed=0)
    assert list(curve.columns) == ["n", "mean_eps", "bound", "beta"]
    assert np.all(curve["bound"] >= curve["mean_eps"])


@pytest.mark.slow
def test_trained_model_violation_is_dominated(di_space, di_spec, solver_cfg, tiny_net):
    L_T = 16
    learner = GuidedTrajectoryLearner(
        di_spec,
        L_T,
        GtlConfig(n_tasks=40, rho=5.0, alpha=0.0),
        solver_cfg,
        TrainConfig(optimizer="lbfgs", max_iter=300),
        tiny_net(di_spec, L_T),
        weights_seed=2,
    )
    train = sample_uniform(di_space, 40, seed=0)
    eps = covering_radius(train)
    lip_cfg = ProbeConfig(method="grid", grid_n=9, n_jacobian=8)
    state = learner.init(train)
    measured = {0: violation_measured(state.weights, di_spec, di_space, 9, L_T)}
    for _ in range(2):
        state = learner.admm_iterate(state)
    measured[2] = violation_measured(state.weights, di_spec, di_space, 9, L_T)

    lip = estimate_lipschitz(state.weights, di_space, lip_cfg, di_spec, L_T)
    report = bounds_report(lip, violation_bound(lip, eps), measured[2], slack=1.2, atol=solver_cfg.feas_tol)
    assert all(report["dominated"].values())
    assert max(measured[2].maxima.values()) <= max(measured[0].maxima.values()) + solver_cfg.feas_tol
