"""
Ablation grid and gradient check
================================

The harness trains every cell of a grid for each seed and tabulates mean
rank-k. The gradient checker compares every differentiable operation with
central finite differences.
"""

from c3m.evaluation import DataSpec, format_table, grid_report, run_ablation, suite
from c3m.gradcheck import run_gradcheck
from c3m.synthgen import GeneratorConfig
from c3m.training import HyperParams

hp = HyperParams(p=16, epochs=6, stage2_start=2)
data = DataSpec(GeneratorConfig(identities=20), (0.6, 0.0, 0.4))
results = run_ablation(suite("ds", seeds=[0, 1]), data, hp)
print(format_table(grid_report(results, hp)))

report = run_gradcheck(modules=("similarity", "objectives"), seeds=2)
print(report.format())
print("all passed:", report.passed)
