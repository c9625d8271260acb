import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from seqsafety.bayes import (DecisionThreshold, PriorSpec, _log_h1_weights, bayes_factor,
                             posterior, run_bayes)
from seqsafety.designs import GRID, LikelihoodProfile, poisson_profile


def gaussian_profile(mean, se):
    return LikelihoodProfile.from_loglik(-0.5 * ((GRID - mean) / se) ** 2)


def conjugate(mean, se, prior):
    prec = 1 / se**2 + 1 / prior.variance
    m = (mean / se**2 + prior.mean / prior.variance) / prec
    return m, math.sqrt(1 / prec)


@pytest.mark.parametrize("mean,se,var", [(0.8, 0.4, 4.0), (-0.3, 0.2, 1.0), (0.1, 0.6, 0.5),
                                         (1.2, 0.15, 4.0)])
def test_normal_normal_conjugate_summaries(mean, se, var):
    prior = PriorSpec(var)
    post = posterior(gaussian_profile(mean, se), prior)
    m, s = conjugate(mean, se, prior)
    assert abs(post.mean - m) < 1e-3
    assert abs(post.sd - s) < 1e-3
    assert abs(post.median - m) < 1e-3
    assert abs(post.p_h1 - stats.norm.sf(0, m, s)) < 1e-3
    lo, hi = post.ci95
    assert abs(lo - stats.norm.ppf(0.025, m, s)) < 1e-3
    assert abs(hi - stats.norm.ppf(0.975, m, s)) < 1e-3


def test_frozen_conjugate_case():
    post = posterior(gaussian_profile(0.8, 0.4), PriorSpec(0.25))
    # precision 1/0.16 + 1/0.25 = 10.25: mean 0.8 * 6.25 / 10.25, sd 10.25^-1/2
    assert abs(post.mean - 0.487805) < 1e-4
    assert abs(post.sd - 0.312348) < 1e-4


def test_bayes_factor_is_posterior_over_prior_odds():
    prior = PriorSpec(4.0)
    post = posterior(gaussian_profile(0.5, 0.3), prior)
    assert abs(post.bf10 - post.p_h1 / post.p_h0) < 1e-6 * post.bf10  # prior odds are 1
    skewed = PriorSpec(1.0, mean=0.5)
    post = posterior(gaussian_profile(0.5, 0.3), skewed)
    prior_odds = stats.norm.sf(0, 0.5, 1) / stats.norm.cdf(0, 0.5, 1)
    assert abs(post.bf10 - post.p_h1 / post.p_h0 / prior_odds) / post.bf10 < 2e-3


def test_flat_likelihood_returns_prior():
    flat = LikelihoodProfile.from_loglik(np.zeros_like(GRID), informative=False)
    post = posterior(flat, PriorSpec(4.0))
    assert abs(post.p_h1 - 0.5) < 1e-12
    assert abs(post.bf10 - 1.0) < 1e-9
    assert abs(post.median) < 1e-3


def test_h1_weights_split_zero_cell():
    w = np.exp(_log_h1_weights(GRID))
    assert w[500] == pytest.approx(GRID_STEP_HALF)
    assert np.all(w[:500] == 0)
    with pytest.raises(ValueError):
        _log_h1_weights(np.linspace(-1, 1, 10))


GRID_STEP_HALF = float(GRID[1] - GRID[0]) / 2


@given(st.floats(-2, 2), st.floats(0.05, 1.0), st.floats(0.01, 0.5))
def test_p_h1_monotone_under_shift(mean, se, shift):
    prior = PriorSpec(4.0)
    a = posterior(gaussian_profile(mean, se), prior).p_h1
    b = posterior(gaussian_profile(mean + shift, se), prior).p_h1
    assert b >= a - 1e-12


@given(st.integers(1, 200), st.floats(1, 200), st.floats(0.25, 10))
def test_posterior_is_normalized_and_ordered(c, mu, var):
    post = posterior(poisson_profile(c, mu), PriorSpec(var))
    cdf = post.cdf()
    assert abs(cdf[-1] - 1) < 1e-12 and np.all(np.diff(cdf) >= -1e-15)
    lo, hi = post.ci95
    assert lo <= post.median <= hi
    assert 0 <= post.p_h1 <= 1


def test_sampling_follows_quantiles():
    post = posterior(gaussian_profile(0.4, 0.2), PriorSpec(4.0))
    x = post.sample(100_000, np.random.default_rng(0))
    assert abs(x.mean() - post.mean) < 0.005
    assert abs(x.std() - post.sd) < 0.005


def test_extreme_evidence_gives_infinite_bf():
    post = posterior(poisson_profile(400, 20.0), PriorSpec(4.0))
    assert post.p_h1 == 1.0
    assert post.bf10 > 1e100 or math.isinf(post.bf10)
    assert bayes_factor(poisson_profile(400, 20.0), PriorSpec(4.0)) == post.bf10


def test_run_bayes_rule():
    prior = PriorSpec(4.0)
    posts = [posterior(gaussian_profile(m, 0.3), prior) for m in (0.1, 0.3, 0.7, 0.9)]
    d = run_bayes(posts, 0.95)
    assert d.stopping_time == 3
    with pytest.raises(ValueError):
        DecisionThreshold(0.4)
    with pytest.raises(ValueError):
        run_bayes(posts, 1.0)
    with pytest.raises(ValueError):
        PriorSpec(0.0)
