"""二重積分器で標準的な回帰とGTLの予測誤差を比べる"""

from guidedtraj.approximator import NetConfig, TrainConfig
from guidedtraj.gtl import GtlConfig, GuidedTrajectoryLearner
from guidedtraj.nlpsolver import SolverConfig
from guidedtraj.systems import SystemSpec
from guidedtraj.taskspace import TaskSpace, sample_uniform

L_T = 32
space = TaskSpace((0.5, 0.8), (1.5, 1.2))
spec = SystemSpec.create("double_integrator", space)
net = NetConfig(
    n_hidden=2,
    hidden_size=32,
    n_upsample=3,
    kernel_len=5,
    state_dim=spec.state_dim,
    seq_len=L_T,
    task_dim=space.dims,
    task_lower=space.lower,
    task_upper=space.upper,
)
learner = GuidedTrajectoryLearner(
    spec,
    L_T,
    GtlConfig(n_tasks=40, rho={"initial": 5.0, "growth": 2.0}, alpha=0.5, max_iterations=3),
    SolverConfig(),
    TrainConfig(max_iter=500),
    net,
)
result = learner.run(sample_uniform(space, 40, seed=0), lambda s, m: print(m.to_row()))
print(f"{result.status}: k = 0 → {result.metrics[0].mean_ninf:.4f}, k = {result.state.iteration} → {result.metrics[-1].mean_ninf:.4f}")
