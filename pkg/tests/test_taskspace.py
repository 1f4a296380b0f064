import math

import numpy as np
import pytest

from guidedtraj.errors import DimensionError
from guidedtraj.taskspace import (
    Task,
    TaskSet,
    TaskSpace,
    covering_radius,
    fit_gumbel_beta,
    gumbel_expectation_bound,
    mean_covering_radius,
    resample_seed,
    sample_uniform,
)


def test_invalid_space():
    with pytest.raises(ValueError):
        TaskSpace((1.0,), (1.0,))
    with pytest.raises(ValueError):
        TaskSpace((0.0, 0.0), (1.0,))
    with pytest.raises(ValueError):
        TaskSpace((0.0,), (math.inf,))


def test_space_geometry(di_space):
    np.testing.assert_allclose(di_space.center, [1.0, 1.0])
    assert di_space.volume == pytest.approx(0.4)
    assert di_space.contains((0.5, 1.2))
    assert not di_space.contains((0.4, 1.0))
    sub = di_space.shrink(0.5)
    np.testing.assert_allclose(sub.lower, [0.75, 0.9])
    np.testing.assert_allclose(sub.upper, [1.25, 1.1])
    assert di_space.grid(3).shape == (9, 2)


def test_sample_uniform_reproducible(di_space):
    a = sample_uniform(di_space, 50, seed=7).as_array()
    b = sample_uniform(di_space, 50, seed=7).as_array()
    c = sample_uniform(di_space, 50, seed=8).as_array()
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.all(a >= di_space.lower_array) and np.all(a <= di_space.upper_array)


def test_sample_uniform_rejects_empty(unit_interval):
    with pytest.raises(ValueError):
        sample_uniform(unit_interval, 0, seed=0)


def test_taskset_checks_membership(unit_interval):
    with pytest.raises(ValueError):
        TaskSet((Task((1.5,)),), 0, unit_interval)
    with pytest.raises(DimensionError):
        TaskSet((Task((0.5, 0.5)),), 0, unit_interval)


def test_taskset_split_keeps_order(unit_interval):
    ts = TaskSet.from_array(np.linspace(0.0, 1.0, 10), unit_interval, seed=3)
    train, holdout = ts.split(3)
    assert len(train) == 7 and len(holdout) == 3
    np.testing.assert_array_equal(holdout.as_array()[:, 0], np.linspace(0.0, 1.0, 10)[7:])
    np.testing.assert_array_equal(ts.restrict_mask(unit_interval.shrink(0.5)).nonzero()[0], [3, 4, 5, 6])


@pytest.mark.parametrize(
    "points, expected",
    [
        ([[0.0], [1.0], [0.5]], 0.5),
        ([[0.0, 0.0], [1.0, 0.0]], 1.0),
    ],
)
def test_covering_radius_examples(points, expected):
    assert covering_radius(np.array(points)) == pytest.approx(expected)


def _brute_force_radius(x):
    nearest = []
    for i in range(x.shape[0]):
        d = np.sqrt(((x - x[i]) ** 2).sum(axis=1))
        d[i] = np.inf
        nearest.append(d.min())
    return max(nearest)


def _random_instances(count, max_n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, max_n + 1))
        m = int(rng.integers(1, 4))
        yield rng.uniform(-1.0, 1.0, size=(n, m))


def test_covering_radius_matches_brute_force():
    for x in _random_instances(20, 300, seed=1):
        assert covering_radius(x) == pytest.approx(_brute_force_radius(x), rel=1e-12)


@pytest.mark.slow
def test_covering_radius_matches_brute_force_up_to_2000():
    for x in _random_instances(50, 2000, seed=2):
        assert covering_radius(x) == pytest.approx(_brute_force_radius(x), rel=1e-12)


def test_covering_radius_ignores_order(di_space):
    ts = sample_uniform(di_space, 300, seed=4)
    x = ts.as_array()
    perm = np.random.default_rng(5).permutation(len(x))
    assert covering_radius(x[perm]) == covering_radius(x) == covering_radius(ts)


def test_covering_radius_with_duplicates():
    x = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    assert covering_radius(x) == 0.0


def test_covering_radius_needs_two_tasks():
    with pytest.raises(ValueError):
        covering_radius(np.array([[0.5]]))


@pytest.mark.parametrize("n, m, expected", [(3, 1, 0.3662), (100, 2, 0.2146)])
def test_gumbel_expectation_bound(n, m, expected):
    assert gumbel_expectation_bound(n, m, 1.0) == pytest.approx(expected, abs=1e-4)


@pytest.mark.parametrize("space", [TaskSpace((0.0,), (1.0,)), TaskSpace((0.0, 0.0), (1.0, 1.0))], ids=["m1", "m2"])
def test_gumbel_bound_dominates_mean_radius(space):
    ns = [50, 100, 200, 400, 800, 1600, 3200]
    m = space.dims
    fit_means = [mean_covering_radius(space, n, 20, seed=10 + k) for k, n in enumerate(ns)]
    beta = fit_gumbel_beta(ns, fit_means, m, margin=1.25)
    check = [mean_covering_radius(space, n, 20, seed=100 + k) for k, n in enumerate(ns)]
    exceed = [n for n, mu in zip(ns, check) if mu > gumbel_expectation_bound(n, m, beta)]
    assert exceed == []


@pytest.mark.parametrize("space", [TaskSpace((0.0,), (1.0,)), TaskSpace((0.0, 0.0), (1.0, 1.0))], ids=["m1", "m2"])
def test_mean_radius_shrinks_with_n(space):
    means = [mean_covering_radius(space, n, 20, seed=30) for n in (25, 50, 100, 200, 400, 800)]
    assert np.all(np.diff(means) < 0.0)


def test_resample_seed():
    assert resample_seed(3, 1) == resample_seed(3, 1)
    seeds = {resample_seed(base, k) for base in range(10) for k in range(1, 6)}
    assert len(seeds) == 50
    # 連番で割り当てるシード(学習、評価、重み、学習順)とは重ならない
    assert seeds.isdisjoint(range(0, 20))
    with pytest.raises(ValueError):
        resample_seed(0, -1)
