import pytest

from guidedtraj.approximator import NetConfig, TrainConfig
from guidedtraj.nlpsolver import SolverConfig
from guidedtraj.systems import SystemSpec
from guidedtraj.taskspace import TaskSpace


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running numerical checks")


@pytest.fixture
def unit_interval():
    return TaskSpace((0.0,), (1.0,))


@pytest.fixture
def di_space():
    # (距離d, 所要時間T)
    return TaskSpace((0.5, 0.8), (1.5, 1.2))


@pytest.fixture
def di_spec(di_space):
    return SystemSpec.create("double_integrator", di_space)


@pytest.fixture
def solver_cfg():
    return SolverConfig(opt_tol=1e-4)


@pytest.fixture
def tiny_net():
    def make(spec, L_T, hidden_size=8):
        space = spec.task_space
        return NetConfig(
            n_hidden=1,
            hidden_size=hidden_size,
            n_upsample=2,
            kernel_len=3,
            state_dim=spec.state_dim,
            seq_len=L_T,
            task_dim=space.dims,
            task_lower=space.lower,
            task_upper=space.upper,
        )

    return make


@pytest.fixture
def quick_train():
    return TrainConfig(optimizer="lbfgs", max_iter=50)
