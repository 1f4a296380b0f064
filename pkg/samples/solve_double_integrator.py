"""二重積分器の軌道最適化を解き、解析解と比べる"""

from guidedtraj.collocation import transcribe
from guidedtraj.nlpsolver import solve
from guidedtraj.systems import SystemSpec, double_integrator_oracle
from guidedtraj.taskspace import Task, TaskSpace

spec = SystemSpec.create("double_integrator", TaskSpace((0.5, 0.8), (1.5, 1.2)))
for d, T in ((0.5, 0.8), (1.0, 1.0), (1.5, 1.2)):
    nlp = transcribe(spec, Task((d, T)), 50)
    report = solve(nlp)
    traj = nlp.trajectory(report.value)
    oracle = double_integrator_oracle(d, T).sample(50)
    print(f"d={d} T={T}: cost {report.objective:.4f}, max |x - x*| {abs(traj.states - oracle.states).max():.2e}")
