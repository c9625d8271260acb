import numpy as np

from seqsafety.evaluation import ControlSuite
from seqsafety.scenarios import (ControlExperiment, ScheduleExperiment,
                                 run_clean_bayes_experiment, run_control_experiment,
                                 run_schedule_experiment)


def test_schedule_experiment_shapes_and_cv_order():
    res = run_schedule_experiment(ScheduleExperiment(n_seeds=50, cv_replicates=10_000))
    assert res["cv"]["hacky"] < res["cv"]["oracle"] < res["cv"]["early"]
    for y in res["type1"].values():
        assert len(y) == 24 and np.all(np.diff(y) >= 0)  # cumulative


def test_clean_experiment_is_reproducible():
    a = run_clean_bayes_experiment(n_seeds=2, n_subjects=500)
    b = run_clean_bayes_experiment(n_seeds=2, n_subjects=500)
    assert a["sd"].shape == (2, 12)
    np.testing.assert_array_equal(a["sd"], b["sd"])


def test_control_experiment_smoke():
    ex = ControlExperiment(n_seeds=1, n_subjects=1000, suite=ControlSuite(n_negative=8))
    table = run_control_experiment(ex).metric_table()
    methods = {r["method"] for r in table.rows}
    assert methods == {"maxsprt", "bayes", "bbc"}
    looks = {r["look"] for r in table.rows}
    assert looks == set(range(1, ex.n_looks + 1))
    rrs = {r["true_rr"] for r in table.rows}
    assert rrs == {1.0, 1.5, 2.0, 4.0}
