"""Scaled-down runs of the three built-in studies.

    python demos/experiments_demo.py

Seed counts are small so this finishes in a few minutes; the acceptance
suite runs the full-size versions.
"""

import numpy as np

from seqsafety.evaluation import ControlSuite
from seqsafety.scenarios import (ControlExperiment, ScheduleExperiment,
                                 run_clean_bayes_experiment, run_confounding_experiment,
                                 run_control_experiment, run_schedule_experiment)

# MaxSPRT: the planned number of looks sets the critical value, and a wrong
# plan moves the realized Type 1 error away from alpha.
sched = run_schedule_experiment(ScheduleExperiment(n_seeds=200, cv_replicates=20_000))
for plan, y in sched["type1"].items():
    print(f"schedule  {plan:>6}: cv={sched['cv'][plan]:.3f}  final Type 1={y[-1]:.3f}")

# Seasonal confounding biases the historical comparator; SCCS is self-matched.
conf = run_confounding_experiment(n_seeds=20)
for design, rr in conf.items():
    print(f"confound  {design:<28} median RR at month 12: {np.nanmedian(rr[:, -1]):.2f}")

# With no bias, the posterior narrows month by month.
clean = run_clean_bayes_experiment(n_seeds=10)
print("clean     median posterior sd by month:",
      np.round(np.median(clean["sd"], axis=0), 3))

# Negative / positive controls: Type 1 and coverage with and without bias correction.
ex = ControlExperiment(n_seeds=3, suite=ControlSuite(n_negative=20, bias_mean=0.25, bias_sd=0.1))
table = run_control_experiment(ex).metric_table()
for r in table.rows:
    if r["look"] == ex.n_looks and r["true_rr"] == 1 and r["delta1"] in (None, 0.95):
        print(f"controls  {r['design']:<24} {r['method']:<8} Type 1={r['type1']:.2f}"
              f"  coverage={r['coverage95']:.2f}")
