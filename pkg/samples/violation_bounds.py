"""学習済みの重みから制約違反の上界を求める

先に ``guidedtraj gtl --config configs/double_integrator.yml --out out/di_gtl`` を実行しておきます。
"""

import sys

from guidedtraj.artifacts import load_weights
from guidedtraj.bounds import ProbeConfig, bounds_report, estimate_lipschitz, violation_bound, violation_measured
from guidedtraj.systems import SystemSpec
from guidedtraj.taskspace import TaskSpace, covering_radius, sample_uniform

path = sys.argv[1] if len(sys.argv) > 1 else "out/di_gtl/checkpoints/final/weights.bin"
weights = load_weights(path)
space = TaskSpace((0.5, 0.8), (1.5, 1.2))
spec = SystemSpec.create("double_integrator", space)
L_T = weights.config.seq_len

eps = covering_radius(sample_uniform(space, 100, seed=0))
lip = estimate_lipschitz(weights, space, ProbeConfig(), spec, L_T)
report = bounds_report(lip, violation_bound(lip, eps), violation_measured(weights, spec, space, 16, L_T))
for name, b in report["bound_i"].items():
    print(f"{name}: bound {b:.3e}, measured {report['measured_i'][name]:.3e}, dominated {report['dominated'][name]}")
