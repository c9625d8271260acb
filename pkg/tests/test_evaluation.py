import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqsafety.designs import GRID, GRID_STEP, LikelihoodProfile, poisson_profile
from seqsafety.evaluation import (DELTA_LATTICE, ControlSuite, DuplicateCell, MetricTable,
                                  ResultStore, calibrate_threshold, cumulative_signal_rate,
                                  estimation_summary, first_crossing,
                                  synthesize_positive_profile, time_to_detection)
from seqsafety.evaluation import testing_rows as add_testing_rows


@given(st.integers(5, 200), st.floats(5, 200), st.sampled_from([1.5, 2.0, 4.0]))
def test_positive_control_shift_is_exact_on_grid(c, mu, rr):
    nc = poisson_profile(c, mu)
    pc = synthesize_positive_profile(nc, rr)
    k = round(math.log(rr) / GRID_STEP)
    assert pc.shift == pytest.approx(k * GRID_STEP, abs=1e-12)
    # equal up to the additive renormalization
    np.testing.assert_allclose(np.diff(pc.loglik[k:]), np.diff(nc.loglik[:-k]), atol=1e-9)
    if nc.estimable and nc.mle + pc.shift < GRID[-2]:
        assert abs(pc.mle - (nc.mle + pc.shift)) < 1e-9
    assert pc.synthetic and pc.look == nc.look


def test_left_edge_is_extrapolated_linearly():
    nc = poisson_profile(30, 20.0)
    pc = synthesize_positive_profile(nc, 2.0)
    k = round(math.log(2.0) / GRID_STEP)
    slope = nc.loglik[1] - nc.loglik[0]
    np.testing.assert_allclose(np.diff(pc.loglik[: k + 1]), slope, atol=1e-9)
    with pytest.raises(ValueError):
        synthesize_positive_profile(nc, 0.5)


def test_control_suite_layout():
    suite = ControlSuite(n_negative=3, positive_rrs=(1.5, 2.0))
    assert suite.rrs == (1, 1, 1, 1.5, 2.0, 1.5, 2.0, 1.5, 2.0)
    assert suite.parents.tolist() == [0, 1, 2, 0, 0, 1, 1, 2, 2]
    assert suite.n_controls == 9
    expanded = suite.expand([poisson_profile(10, 8.0)] * 3)
    assert len(expanded) == 9 and expanded[4].shift > expanded[3].shift
    with pytest.raises(ValueError):
        ControlSuite(n_negative=1)


def test_first_crossing_and_rates():
    stats = np.array([[0.1, 0.5, 0.97, 0.99],
                      [0.2, np.nan, 0.99, 0.5],
                      [0.1, 0.1, 0.1, 0.1]])
    first = first_crossing(stats, 0.95)
    assert first.tolist() == [2, 2, -1]
    assert first_crossing(stats, np.array([0.05, 0.95, 0.05])).tolist() == [0, 2, 0]
    rate = cumulative_signal_rate(first, 4)
    np.testing.assert_allclose(rate, [0, 0, 2 / 3, 2 / 3])
    assert time_to_detection(rate, 0.5) == 3
    assert time_to_detection(rate, 0.9) is None


@given(st.lists(st.integers(-1, 11), min_size=1, max_size=50))
def test_cumulative_rate_is_non_decreasing(first):
    r = cumulative_signal_rate(np.array(first), 12)
    assert np.all(np.diff(r) >= 0) and 0 <= r[0] and r[-1] <= 1


def test_estimation_summary_counts_only_estimable():
    est = np.array([0.1, 0.5, np.nan, 0.2])
    lo, hi = est - 0.3, est + 0.3
    mse, cov, ne = estimation_summary(est, lo, hi, np.zeros(4),
                                      np.array([True, True, False, True]))
    assert mse == pytest.approx((0.01 + 0.25 + 0.04) / 3)
    assert cov == pytest.approx(2 / 3)
    assert ne == pytest.approx(0.25)


def test_calibrate_threshold_picks_smallest_admissible():
    peaks = np.linspace(0.6, 0.99, 40)
    traj = np.stack([np.full(3, p) for p in peaks])
    res = calibrate_threshold(traj, 0.1)
    assert res.achieved_type1 <= 0.1 and not res.flagged
    lower = DELTA_LATTICE[DELTA_LATTICE < res.delta1][-1]
    assert np.mean(peaks > lower) > 0.1
    res = calibrate_threshold(np.full((10, 3), 0.9999), 0.05)
    assert res.flagged and res.delta1 == 0.999


@given(st.lists(st.floats(0.5, 1.0), min_size=5, max_size=40), st.floats(0.0, 0.5))
def test_calibrated_type1_never_exceeds_target_unless_flagged(peaks, target):
    traj = np.array(peaks)[:, None]
    res = calibrate_threshold(traj, target)
    assert res.flagged or res.achieved_type1 <= target + 1e-12


def test_metric_table_rows_and_csv(tmp_path):
    t = MetricTable()
    first = np.array([-1, 3, -1, 0, 1, 5, -1, 2])
    rr = np.array([1, 1, 1, 1, 2, 2, 2, 2.0])
    add_testing_rows(t, first, rr, 6, method="m", design="d", prior="NA", delta1=None)
    assert t.value("type1", look=6, true_rr=1.0) == 0.5
    assert t.value("sensitivity", look=3, true_rr=2.0) == 0.5
    assert t.value("ttd50", look=1, true_rr=2.0) == 3
    assert t.series("type1", true_rr=1.0).tolist() == [0.25, 0.25, 0.25, 0.5, 0.5, 0.5]
    t.to_csv(tmp_path / "m.csv")
    back = MetricTable.from_csv(tmp_path / "m.csv")
    assert len(back.rows) == len(t.rows)
    assert back.value("ttd25", look=2, true_rr=2.0) == 2
    assert back.value("ttd50", look=2, true_rr=1.0) is None
    with pytest.raises(ValueError):
        t.add(method="x")


def _append(args):
    path, cell = args
    ResultStore(path, ["x"]).append(cell, [{"x": cell}])


def test_result_store_rejects_duplicates_and_survives_concurrency(tmp_path):
    path = tmp_path / "store.csv"
    store = ResultStore(path, ["x", "y"], header="manifest: abc")
    store.append("a", [{"x": 1, "y": 2.5}, {"x": 2}])
    assert "a" in store and "b" not in store
    with pytest.raises(DuplicateCell):
        store.append("a", [{"x": 3}])
    rows = store.rows()
    assert [r["y"] for r in rows] == ["2.5", "NA"]
    path2 = tmp_path / "conc.csv"
    with ProcessPoolExecutor(2) as ex:
        list(ex.map(_append, [(path2, f"c{i}") for i in range(20)]))
    got = sorted(r["cell_id"] for r in ResultStore(path2, ["x"]).rows())
    assert got == sorted(f"c{i}" for i in range(20))


def test_non_estimable_profile_stays_flagged_after_shift():
    flat = LikelihoodProfile.from_loglik(np.zeros_like(GRID), informative=False)
    assert not synthesize_positive_profile(flat, 2.0).estimable
