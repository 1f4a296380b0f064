"""一様に選んだタスクの被覆半径がNとともに縮む様子"""

from guidedtraj.bounds import gumbel_curve
from guidedtraj.taskspace import TaskSpace

print(gumbel_curve(TaskSpace((2.5, 2.5), (3.5, 3.5)), [50, 100, 200, 400, 800], replicates=10, seed=0))
