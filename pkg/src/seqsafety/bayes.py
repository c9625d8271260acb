"""Grid posterior for the log rate ratio, without bias correction.

Everything is quadrature on the profile grid: trapezoid weights in log space,
so normalizers never underflow unless the likelihood is -inf everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .designs import LikelihoodProfile
from .maxsprt import SequentialDecision

STANDARD_PRIOR_VARIANCES = (1.5, 4.0, 10.0)
STANDARD_THRESHOLDS = (0.8, 0.9, 0.95)


@dataclass(frozen=True)
class PriorSpec:
    """Normal prior on beta. A zero mean puts equal mass on both hypotheses."""

    variance: float = 4.0
    mean: float = 0.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("prior variance must be positive")

    def logpdf(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        return -0.5 * (np.log(2 * np.pi * self.variance) + (beta - self.mean) ** 2 / self.variance)

    @property
    def label(self) -> str:
        return f"sigma2_{self.variance:g}"


@dataclass(frozen=True)
class DecisionThreshold:
    delta1: float = 0.95

    def __post_init__(self):
        if not 0.5 < self.delta1 < 1.0:
            raise ValueError("delta1 must lie in (0.5, 1)")


def _log_trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    w = np.empty_like(grid)
    d = np.diff(grid)
    w[0], w[-1] = d[0] / 2, d[-1] / 2
    w[1:-1] = (d[:-1] + d[1:]) / 2
    return np.log(w)


def _log_h1_weights(grid: np.ndarray) -> np.ndarray:
    """Trapezoid weights of the integral over beta >= 0.

    The grid point at 0 keeps only the half cell to its right, so a
    symmetric density splits its mass exactly in half.
    """
    if grid[0] < 0 < grid[-1] and not np.any(grid == 0):
        raise ValueError("a grid spanning 0 must contain 0")
    w = np.exp(_log_trapezoid_weights(grid))
    out = np.where(grid > 0, w, 0.0)
    zero = np.flatnonzero(grid == 0)
    if len(zero) and zero[0] + 1 < len(grid):
        out[zero[0]] = (grid[zero[0] + 1] - grid[zero[0]]) / 2
    with np.errstate(divide="ignore"):
        return np.log(out)


def _lse(x: np.ndarray) -> float:
    m = np.max(x)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(x - m))))


_WEIGHT_CACHE: dict = {}


def _prior_terms(grid: np.ndarray, prior: PriorSpec):
    """Quadrature weights and prior terms, cached per (grid object, prior)."""
    key = (id(grid), prior)
    hit = _WEIGHT_CACHE.get(key)
    if hit is not None and hit[0] is grid:
        return hit[1]
    lw = _log_trapezoid_weights(grid)
    lw1 = _log_h1_weights(grid)
    with np.errstate(divide="ignore"):
        lw0 = np.log(np.clip(np.exp(lw) - np.exp(lw1), 0.0, None))
    log_prior = prior.logpdf(grid)
    log_prior_odds = _lse(log_prior + lw1) - _lse(log_prior + lw0)
    terms = (lw, lw1, lw0, log_prior, log_prior_odds)
    if len(_WEIGHT_CACHE) > 64:
        _WEIGHT_CACHE.clear()
    _WEIGHT_CACHE[key] = (grid, terms)
    return terms


@dataclass(frozen=True)
class GridPosterior:
    grid: np.ndarray
    log_density: np.ndarray
    p_h1: float
    median: float
    mean: float
    sd: float
    ci95: tuple[float, float]
    log_bf10: float
    look: int | None = None
    cdf_values: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    @property
    def p_h0(self) -> float:
        return 1.0 - self.p_h1

    @property
    def bf10(self) -> float:
        return float(np.exp(self.log_bf10)) if self.log_bf10 < 700 else float("inf")

    def cdf(self) -> np.ndarray:
        """Cumulative trapezoid integral of the density on the grid."""
        if self.cdf_values is not None:
            return self.cdf_values
        f = self.density
        cells = 0.5 * (f[1:] + f[:-1]) * np.diff(self.grid)
        c = np.concatenate([[0.0], np.cumsum(cells)])
        return c / c[-1]

    def quantile(self, q) -> np.ndarray:
        """Inverse CDF by linear interpolation between grid points."""
        c = self.cdf()
        q = np.asarray(q, dtype=float)
        # duplicate CDF values (zero-density stretches) break np.interp; keep the first rise
        keep = np.concatenate([[True], np.diff(c) > 0])
        return np.interp(q, c[keep], self.grid[keep])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.quantile(rng.random(n))


def posterior(profile: LikelihoodProfile, prior: PriorSpec) -> GridPosterior:
    """Normalized posterior on the profile grid with its summaries."""
    g = profile.grid
    lw, lw1, lw0, log_prior, log_prior_odds = _prior_terms(g, prior)
    log_unnorm = profile.loglik + log_prior
    log_z = _lse(log_unnorm + lw)
    if not np.isfinite(log_z):
        raise FloatingPointError("posterior normalizer underflows: likelihood is -inf everywhere")
    log_density = log_unnorm - log_z
    log_h1 = _lse(log_unnorm + lw1) - log_z
    log_h0 = _lse(log_unnorm + lw0) - log_z
    p_h1 = float(np.clip(np.exp(log_h1), 0.0, 1.0))
    f = np.exp(log_density)
    w = f * np.exp(lw)
    mean = float(np.sum(w * g))
    sd = float(np.sqrt(max(np.sum(w * (g - mean) ** 2), 0.0)))
    # marginals of each hypothesis under the prior restricted to it, so that
    # BF10 = posterior odds / prior odds
    log_bf10 = float(log_h1 - log_h0 - log_prior_odds) if np.isfinite(log_h0) else float("inf")
    cells = 0.5 * (f[1:] + f[:-1]) * np.diff(g)
    cdf = np.concatenate([[0.0], np.cumsum(cells)])
    cdf /= cdf[-1]
    post = GridPosterior(g, log_density, p_h1, 0.0, mean, sd, (0.0, 0.0), log_bf10,
                         profile.look, cdf)
    lo, med, hi = post.quantile([0.025, 0.5, 0.975])
    return GridPosterior(g, log_density, p_h1, float(med), mean, sd, (float(lo), float(hi)),
                         log_bf10, profile.look, cdf)


def posterior_probability_h1(post: GridPosterior) -> float:
    return post.p_h1


def bayes_factor(profile: LikelihoodProfile, prior: PriorSpec) -> float:
    """BF10 = m1 / m0; +inf when the null marginal underflows."""
    return posterior(profile, prior).bf10


def run_bayes(posteriors_by_look: Sequence[GridPosterior], delta1: float,
              stop: bool = True) -> SequentialDecision:
    """Signal at the first look whose posterior probability of H1 exceeds delta1."""
    DecisionThreshold(delta1)
    looks = [p.look if p.look is not None else t for t, p in enumerate(posteriors_by_look, 1)]
    return SequentialDecision.first_crossing("bayes", looks, [p.p_h1 for p in posteriors_by_look],
                                             delta1, stop)
