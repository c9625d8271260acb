import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from seqsafety.rng import RandomStream
from seqsafety.simulation import (ConfigError, ScenarioConfig, _poisson_from_uniform, accrue,
                                  at_risk_mask, draw_cohort, month_cutoffs, month_of_week,
                                  seasonal_curve, seasonal_uptake, simulate_events,
                                  simulate_population)


def test_month_cutoffs_alternate_four_and_five_weeks():
    cuts = month_cutoffs()
    assert cuts[0] == 52 + 4 and cuts[-1] == 104
    widths = np.diff([52] + cuts)
    assert set(widths) == {4, 5} and widths.sum() == 52


def test_month_of_week_matches_cutoffs():
    weeks = np.arange(1, 53)
    months = month_of_week(weeks)
    assert months[0] == 0 and months[-1] == 11
    ends = np.array(month_cutoffs()) - 52
    for m, end in enumerate(ends):
        assert months[end - 1] == m


@given(st.floats(0.01, 1.0), st.floats(0.0, 2.0), st.floats(1, 52))
def test_seasonal_uptake_sums_to_coverage(coverage, amplitude, peak):
    u = seasonal_uptake(coverage, amplitude, peak)
    assert u.shape == (52,) and np.all(u >= 0)
    assert math.isclose(u.sum(), coverage, rel_tol=1e-12)


def test_seasonal_curve_peaks_at_peak_week():
    c = seasonal_curve(-5.0, 0.4, peak_week=10)
    assert int(np.argmax(c)) + 1 == 10
    assert math.isclose(c.mean(), -5.0, abs_tol=1e-12)


@pytest.mark.parametrize("field,value", [
    ("n_subjects", 0), ("risk_window_weeks", 0), ("covariate_prevalence", 1.5),
    ("historical_rate_multiplier", 0.0), ("historical_rate_multiplier", 1.2),
    ("uptake_curve", np.full(52, 0.03)), ("uptake_curve", np.full(10, 0.01)),
    ("baseline_log_rate", np.zeros(30)), ("historical_weeks", (1, 40)),
])
def test_invalid_configs_are_rejected(small_config, field, value):
    with pytest.raises(ConfigError):
        dataclasses.replace(small_config, **{field: value})


def test_unrealistic_rate_is_rejected(small_config):
    cfg = dataclasses.replace(small_config, baseline_log_rate=np.full(52, 12.0))
    with pytest.raises(ConfigError):
        simulate_population(cfg)


def test_poisson_from_uniform_matches_inverse_cdf():
    rng = np.random.default_rng(0)
    u = rng.random(5000)
    lam = np.exp(rng.uniform(-6, 3.5, 5000))
    ours = _poisson_from_uniform(u, lam)
    ref = stats.poisson.ppf(u, lam).astype(int)
    np.testing.assert_array_equal(ours, ref)


def test_simulation_is_deterministic(small_config):
    a = simulate_population(small_config)
    b = simulate_population(small_config)
    np.testing.assert_array_equal(a.counts, b.counts)
    np.testing.assert_array_equal(a.vaccination_week, b.vaccination_week)


def test_subject_draws_do_not_depend_on_cohort_size(small_config):
    # subject i's trajectory is a function of (seed, i) only
    big = simulate_population(dataclasses.replace(small_config, n_subjects=800))
    small = simulate_population(small_config)
    np.testing.assert_array_equal(big.counts[:400], small.counts)
    np.testing.assert_array_equal(big.covariate[:400], small.covariate)


def test_different_seeds_differ(small_config):
    a = simulate_population(small_config, RandomStream(1))
    b = simulate_population(small_config, RandomStream(2))
    assert not np.array_equal(a.counts, b.counts)


def test_vaccination_weeks_in_surveillance_year(small_config):
    pop = simulate_population(small_config)
    v = pop.vaccination_week
    assert np.all((v == 0) | ((v >= 53) & (v <= 104)))
    assert abs((v > 0).mean() - 0.7) < 0.08


def test_at_risk_mask_window():
    m = at_risk_mask(np.array([0, 60, 103]), 6, 104)
    assert m[0].sum() == 0
    assert np.flatnonzero(m[1]).tolist() == list(range(60, 66))  # weeks 61..66, 0-based
    assert np.flatnonzero(m[2]).tolist() == [103]  # truncated at the end of follow-up


def test_injected_effect_raises_at_risk_rate():
    cfg = ScenarioConfig(n_subjects=20000, baseline_log_rate=np.full(52, math.log(0.005)),
                         uptake_curve=np.full(52, 0.9 / 52), true_log_rr=math.log(3.0),
                         historical_rate_multiplier=1.0, master_seed=1)
    pop = simulate_population(cfg)
    risk = at_risk_mask(pop.vaccination_week, cfg.risk_window_weeks, cfg.n_weeks_total)
    ratio = pop.counts[risk].mean() / pop.counts[:, :52].mean()
    assert 2.6 < ratio < 3.4


def test_second_outcome_shares_cohort(small_config):
    stream = RandomStream(4)
    cohort = draw_cohort(small_config, stream)
    a = simulate_events(cohort, small_config, stream.child("a"))
    b = simulate_events(cohort, small_config, stream.child("b"))
    assert a.shape == b.shape and not np.array_equal(a, b)


def test_accrue_hides_future_vaccinations(small_config):
    pop = simulate_population(small_config)
    snaps = accrue(pop, month_cutoffs())
    assert [s.look_index for s in snaps] == list(range(1, 13))
    first = snaps[0]
    assert np.all(first.vaccination_week <= first.cutoff_week)
    assert first.counts.shape[1] == first.cutoff_week
    totals = [s.total_events() for s in snaps]
    assert totals == sorted(totals)
    with pytest.raises(ValueError):
        accrue(pop, [60, 58])
    with pytest.raises(ValueError):
        accrue(pop, [40])
