import logging
import math
from pathlib import Path

import numpy as np
import pytest

from guidedtraj.approximator import TrainConfig, consensus_points
from guidedtraj.collocation import transcribe
from guidedtraj.config import ExperimentConfig, SeedConfig
from guidedtraj.errors import ConfigError, GuidedTrajError, TrendError
from guidedtraj.gtl import (
    ConvergenceRegime,
    GtlConfig,
    GuidedTrajectoryLearner,
    IterationMetrics,
    RhoSchedule,
    RunResult,
    RunStatus,
    StoppingMode,
    convergence_check,
    monotone_trend_violations,
    plateau_detected,
    stopping_decrease,
)
from guidedtraj.nlpsolver import SolverConfig
from guidedtraj.taskspace import sample_uniform

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
L_T = 12


@pytest.fixture
def make_learner(di_spec, solver_cfg, quick_train, tiny_net):
    def make(**gtl):
        params = {"n_tasks": 4, "rho": 5.0, "max_iterations": 2, "stopping_tol": 0.0}
        params.update(gtl)
        return GuidedTrajectoryLearner(
            di_spec, L_T, GtlConfig(**params), solver_cfg, quick_train, tiny_net(di_spec, L_T), weights_seed=2
        )

    return make


@pytest.fixture
def tasks(di_space):
    return sample_uniform(di_space, 4, seed=0)


def test_init_is_plain_regression(make_learner, tasks):
    state = make_learner().init(tasks)
    assert state.iteration == 0
    assert state.solved == (True,) * 4
    assert state.consensus.shape == (4, L_T * 2 + 1)
    np.testing.assert_array_equal(state.multipliers, 0.0)
    assert state.rho == 5.0


def test_init_is_deterministic(make_learner, tasks):
    a = make_learner().init(tasks)
    b = make_learner().init(tasks)
    np.testing.assert_array_equal(a.consensus, b.consensus)
    np.testing.assert_array_equal(a.weights.flat, b.weights.flat)


def test_init_fails_when_nothing_solves(di_spec, quick_train, tiny_net, tasks):
    hopeless = SolverConfig(max_outer=1, max_inner=1)
    learner = GuidedTrajectoryLearner(di_spec, L_T, GtlConfig(n_tasks=4), hopeless, quick_train, tiny_net(di_spec, L_T))
    with pytest.raises(GuidedTrajError):
        learner.init(tasks)


def test_network_shape_must_match(di_spec, solver_cfg, quick_train, tiny_net):
    with pytest.raises(ConfigError):
        GuidedTrajectoryLearner(di_spec, L_T, GtlConfig(), solver_cfg, quick_train, tiny_net(di_spec, L_T + 4))


def test_penalty_mode_keeps_multipliers_zero(make_learner, tasks):
    learner = make_learner(alpha=0.0)
    state = learner.admm_iterate(learner.init(tasks))
    assert state.iteration == 1
    np.testing.assert_array_equal(state.multipliers, 0.0)


def test_multiplier_update(make_learner, tasks):
    learner = make_learner(alpha=0.5)
    s1 = learner.admm_iterate(learner.init(tasks))
    idx = s1.solved_indices
    np.testing.assert_allclose(s1.multipliers[idx], 0.5 * s1.residuals()[idx], rtol=0.0, atol=1e-14)
    s2 = learner.admm_iterate(s1)
    idx = s2.solved_indices
    np.testing.assert_allclose(
        s2.multipliers[idx] - s1.multipliers[idx], 0.5 * s2.residuals()[idx], rtol=0.0, atol=1e-12
    )


def test_augmented_lagrangian_reevaluation(make_learner, tasks, di_spec):
    learner = make_learner(alpha=0.5)
    state = learner.admm_iterate(learner.init(tasks))
    idx = state.solved_indices
    costs = np.array(
        [transcribe(di_spec, state.tasks[i], L_T).cost(state.trajectories[i].to_vector()) for i in idx]
    )
    Y = np.stack([state.trajectories[i].consensus_vector(state.gamma) for i in idx])
    r = Y - state.consensus[idx] + state.multipliers[idx]
    expected = costs.mean() + 0.5 * state.rho * float((r**2).sum())
    assert learner.augmented_lagrangian(state) == pytest.approx(expected, rel=1e-12)


def test_penalty_mode_matches_penalty_objective(make_learner, tasks):
    learner = make_learner(alpha=0.0, gamma=1.0)
    state = learner.admm_iterate(learner.init(tasks))
    assert learner.subproblem_objective(state) == pytest.approx(learner.penalty_objective(state), rel=1e-12)


def test_metrics_row(make_learner, tasks):
    learner = make_learner()
    state = learner.init(tasks)
    m = learner.metrics(state)
    row = m.to_row()
    assert row["k"] == 0 and row["n_solved"] == 4
    assert m.errors.shape == (4,)
    assert row["mean_ninf"] == pytest.approx(m.errors.mean())
    assert row["max_ninf"] == m.errors.max()
    assert row["multiplier_norm"] == 0.0


def test_run_uses_full_budget(make_learner, tasks):
    seen = []
    learner = make_learner(alpha=0.5, stopping_mode="multiplier_delta", stopping_tol=0.0)
    result = learner.run(tasks, lambda s, m: seen.append(m.k))
    assert seen == [0, 1, 2]
    assert len(result.metrics) == 3
    assert result.status is RunStatus.BUDGET
    assert result.state.iteration == 2


def _metrics(k, mean_ninf):
    return IterationMetrics(
        k=k,
        rho=5.0,
        mean_ninf=mean_ninf,
        max_ninf=mean_ninf,
        frac_gt_thresh1=0.0,
        frac_gt_thresh2=0.0,
        mean_cost=0.0,
        multiplier_norm=0.0,
        recon_error=mean_ninf,
        mean_ninf_sq=mean_ninf**2,
        mean_duration_error=0.0,
        augmented_lagrangian=0.0,
        n_solved=4,
    )


def test_stopping_decrease_is_signed():
    falling = [_metrics(0, 0.2), _metrics(1, 0.1)]
    rising = [_metrics(0, 0.1), _metrics(1, 0.2)]
    assert stopping_decrease(falling) == pytest.approx(0.03)
    assert stopping_decrease(rising) == pytest.approx(-0.03)
    with pytest.raises(ValueError):
        stopping_decrease(falling[:1])


def test_rising_error_stops_the_run(make_learner, tasks, monkeypatch):
    monkeypatch.setattr(
        GuidedTrajectoryLearner, "metrics", lambda self, state: _metrics(state.iteration, 0.1 + 0.05 * state.iteration)
    )
    result = make_learner(max_iterations=5, stopping_tol=1e-6).run(tasks)
    assert result.status is RunStatus.CRITERION
    assert [m.k for m in result.metrics] == [0, 1]


def test_trend_violations_from_history():
    history = (_metrics(0, 0.1), _metrics(1, 0.05), _metrics(2, 0.12), _metrics(3, 0.1))
    assert monotone_trend_violations(history) == [2]
    assert monotone_trend_violations(history[:2]) == []
    assert monotone_trend_violations(()) == []
    result = RunResult(None, history, RunStatus.BUDGET)
    assert result.trend_violations == [2]
    with pytest.raises(TrendError) as info:
        result.check_trend()
    assert info.value.iterations == [2]
    assert info.value.to_dict()["kind"] == "trend_violation"
    ok = RunResult(None, history[:2], RunStatus.BUDGET)
    assert ok.check_trend() is ok


def test_run_stops_on_multiplier_delta(make_learner, tasks):
    learner = make_learner(alpha=0.5, stopping_mode="multiplier_delta", stopping_tol=1e9, max_iterations=5)
    result = learner.run(tasks)
    assert result.status is RunStatus.CRITERION
    assert len(result.metrics) == 2


def test_resampling_draws_new_tasks(make_learner, tasks):
    learner = make_learner(alpha=0.0, resample_each_iter=True)
    state = learner.admm_iterate(learner.init(tasks))
    assert not np.array_equal(state.tasks.as_array(), tasks.as_array())
    np.testing.assert_array_equal(state.multipliers, 0.0)


def test_resampled_tasks_are_disjoint_from_holdout(make_learner, tasks, di_space):
    # task_seed 0 のとき評価用タスクはシード1から作られる
    holdout = sample_uniform(di_space, 4, SeedConfig.from_base(0).holdout)
    learner = make_learner(alpha=0.0, resample_each_iter=True)
    state = learner.init(tasks)
    for _ in range(2):
        state = learner.admm_iterate(state)
        assert state.tasks.seed != holdout.seed
        drawn = state.tasks.as_array()
        held = holdout.as_array()
        assert not np.any(np.all(drawn[:, None, :] == held[None, :, :], axis=2))


def test_holdout_evaluation(make_learner, tasks, di_space):
    learner = make_learner(alpha=0.0)
    holdout = sample_uniform(di_space, 3, seed=1)
    state = learner.init(tasks)
    res0 = learner.evaluate_holdout(state, holdout)
    assert res0.errors.shape == (sum(res0.solved),)
    s1 = learner.admm_iterate(state)
    res1 = learner.evaluate_holdout(s1, holdout, res0.trajectories)
    assert len(res1.trajectories) == 3
    assert np.all(res1.errors >= 0.0)


def test_continuity_study(make_learner, tasks):
    learner = make_learner()
    state = learner.init(tasks)
    study = learner.continuity_study(state, n_points=5, coord=0)
    assert study.node == math.floor(0.2 * L_T)
    np.testing.assert_allclose(study.tau, np.linspace(0.5, 1.5, 5))
    assert study.original.shape == study.guided.shape == study.prediction.shape == (5,)
    assert study.max_jump("prediction") >= 0.0
    with pytest.raises(ValueError):
        learner.continuity_study(state, coord=2)


def test_rho_schedule():
    sched = RhoSchedule(initial=5.0, growth=2.0, maximum=30.0)
    assert [sched.at(k) for k in range(4)] == [5.0, 10.0, 20.0, 30.0]
    assert not sched.unbounded
    assert RhoSchedule(1.0, 2.0).unbounded
    with pytest.raises(ConfigError):
        RhoSchedule(growth=0.5)
    with pytest.raises(ConfigError):
        RhoSchedule(initial=5.0, maximum=1.0)


def test_gtl_config_validation():
    assert GtlConfig(rho={"initial": 2.0, "growth": 1.5}).rho.at(1) == 3.0
    assert GtlConfig(stopping_mode="multiplier_delta", alpha=0.5).stopping_mode is StoppingMode.MULTIPLIER_DELTA
    with pytest.raises(ConfigError):
        GtlConfig(stopping_mode="multiplier_delta", alpha=0.0)
    with pytest.raises(ConfigError):
        GtlConfig(resample_each_iter=True, alpha=0.5)
    with pytest.raises(ConfigError):
        GtlConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        GtlConfig(stopping_mode="patience")


def test_convergence_regimes(caplog):
    dual = convergence_check(GtlConfig(alpha=0.5, rho=5.0), lipschitz_L=1.0)
    assert dual.regime is ConvergenceRegime.DUAL_STEP_RHO_ABOVE_L
    assert dual.first_k_above_L == 0
    penalty = convergence_check(GtlConfig(alpha=0.0, rho={"initial": 1.0, "growth": 2.0}))
    assert penalty.regime is ConvergenceRegime.PENALTY_RHO_UNBOUNDED
    with caplog.at_level(logging.WARNING, logger="guidedtraj.gtl"):
        none = convergence_check(GtlConfig(alpha=0.0, rho=5.0))
    assert not none
    assert "no convergence regime" in caplog.text
    assert not convergence_check(GtlConfig(alpha=0.5, rho=0.5), lipschitz_L=1.0)


@pytest.mark.parametrize(
    "values, expected",
    [
        ([1.0, 0.5, 0.49, 0.485, 0.484], True),
        ([1.0, 0.5, 0.25, 0.125], False),
        ([0.3, 0.3], False),
        ([0.0, 0.0, 0.0, 0.0], False),
    ],
)
def test_plateau_detected(values, expected):
    assert plateau_detected(values) is expected


def test_consensus_matches_forward_pass(make_learner, tasks):
    learner = make_learner(alpha=0.5)
    state = learner.init(tasks)
    for _ in range(2):
        np.testing.assert_array_equal(consensus_points(state.weights, state.tasks, state.gamma), state.consensus)
        state = learner.admm_iterate(state)
    np.testing.assert_array_equal(consensus_points(state.weights, state.tasks, state.gamma), state.consensus)


def test_multipliers_accumulate_residuals_with_frozen_weights(make_learner, tasks, monkeypatch):
    monkeypatch.setattr(GuidedTrajectoryLearner, "_train", lambda self, w0, targets, ts: w0)
    learner = make_learner(alpha=1.0)
    s0 = learner.init(tasks)
    s1 = learner.admm_iterate(s0)
    s2 = learner.admm_iterate(s1)
    np.testing.assert_array_equal(s2.consensus, s0.consensus)
    idx = [i for i in range(len(tasks)) if s1.solved[i] and s2.solved[i]]
    assert idx
    np.testing.assert_allclose(
        s2.multipliers[idx], s1.residuals()[idx] + s2.residuals()[idx], rtol=0.0, atol=1e-12
    )


@pytest.mark.slow
def test_penalty_mode_reconstruction_error_plateaus(di_spec, solver_cfg, tiny_net, di_space):
    learner = GuidedTrajectoryLearner(
        di_spec,
        L_T,
        GtlConfig(n_tasks=12, rho=5.0, alpha=0.0),
        solver_cfg,
        TrainConfig(optimizer="lbfgs", max_iter=500),
        tiny_net(di_spec, L_T, hidden_size=4),
        weights_seed=2,
    )
    state = learner.init(sample_uniform(di_space, 12, seed=6))
    recon = [learner.metrics(state).recon_error]
    for _ in range(12):
        state = learner.admm_iterate(state)
        recon.append(learner.metrics(state).recon_error)
    assert recon[-1] > 0.0
    assert plateau_detected(recon)


def _benchmark_learner(cfg):
    spec = cfg.build_system()
    learner = GuidedTrajectoryLearner(
        spec,
        cfg.L_T,
        cfg.gtl,
        cfg.solver,
        cfg.train_config(),
        cfg.net_config(spec),
        weights_seed=cfg.seeds.weights,
        task_seed=cfg.seeds.tasks,
        thresholds=cfg.thresholds,
    )
    train = sample_uniform(spec.task_space, cfg.n_tasks, cfg.seeds.tasks)
    holdout = sample_uniform(spec.task_space, cfg.holdout_size, cfg.seeds.holdout)
    return learner, train, holdout


@pytest.mark.slow
def test_discontinuous_family_holdout_trend_and_continuity():
    cfg = ExperimentConfig.load(CONFIGS / "discontinuous_family.yml")
    learner, train, holdout = _benchmark_learner(cfg)
    state = learner.init(train)
    baseline = learner.evaluate_holdout(state, holdout)
    history = [learner.metrics(state)]
    previous = baseline.trajectories
    for _ in range(2):
        state = learner.admm_iterate(state)
        history.append(learner.metrics(state))
        res = learner.evaluate_holdout(state, holdout, previous)
        previous = res.trajectories
    assert state.iteration == 2
    assert monotone_trend_violations(history) == []
    assert res.errors.mean() <= 0.5 * baseline.errors.mean()
    t1 = cfg.thresholds[0]
    assert np.mean(res.errors > t1) < np.mean(baseline.errors > t1)

    study = learner.continuity_study(state, cfg.continuity.n_points, cfg.continuity.coord)
    assert study.max_jump("original") > 10.0 * study.max_jump("guided")
