"""Empirical bias distribution from negative controls, and de-biased posteriors.

Each negative control i has true log RR 0, so its estimable effect is pure
bias ``b_i``. The controls share a hierarchical model

    b_i ~ Normal(b_bar, tau^2)   or   b_i ~ t_k(b_bar, tau)
    b_bar ~ Normal(mu_b, sigma_b^2),  tau ~ HalfNormal(sigma_tau^2)

with control i's likelihood being its profile evaluated at ``b_i``. The
posterior is sampled with random-walk Metropolis-within-Gibbs (compiled with
numba). For an outcome of interest the biased effect is drawn from its grid
posterior, a bias is drawn from the posterior predictive, and their
difference is the de-biased effect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy import stats

from .bayes import GridPosterior, PriorSpec, posterior
from .designs import GRID, LikelihoodProfile
from .maxsprt import SequentialDecision
from .rng import RandomStream


class InsufficientEvidence(ValueError):
    """Too little negative-control information to fit the bias model."""


@dataclass(frozen=True)
class BiasModelSpec:
    family: str = "t"
    t_dof: float = 4.0
    mu_b: float = 0.0
    sigma2_b: float = 2.0
    sigma2_tau: float = 0.5

    def __post_init__(self):
        if self.family not in ("normal", "t"):
            raise ValueError("family must be 'normal' or 't'")
        if self.family == "t" and self.t_dof < 3:
            raise ValueError("t_dof must be >= 3")
        if not (self.sigma2_b > 0 and self.sigma2_tau > 0):
            raise ValueError("hyperprior variances must be positive")


@dataclass(frozen=True)
class McmcSpec:
    total_iterations: int = 110_000
    burn_in: int = 10_000
    thin: int = 100
    chains: int = 4
    seed: int = 0
    target_acceptance: float = 0.44

    def __post_init__(self):
        if self.chains < 1 or self.thin < 1 or not 0 <= self.burn_in < self.total_iterations:
            raise ValueError("invalid MCMC schedule")
        if self.retained_per_chain < 500:
            raise ValueError("schedule retains fewer than 500 samples per chain")

    @property
    def retained_per_chain(self) -> int:
        return (self.total_iterations - self.burn_in) // self.thin


# ---------------------------------------------------------------------------
# compiled sampler


@numba.njit(cache=True)
def _interp(prof, g0, step, x):
    u = (x - g0) / step
    if u < 0.0 or u > prof.shape[0] - 1:
        return -np.inf
    j = int(u)
    if j >= prof.shape[0] - 1:
        return prof[prof.shape[0] - 1]
    f = u - j
    return prof[j] * (1.0 - f) + prof[j + 1] * f


@numba.njit(cache=True)
def _log_kernel(b, bbar, tau, is_t, dof):
    """Log density of b given (b_bar, tau) without the -log(tau) term."""
    z = (b - bbar) / tau
    if is_t:
        return -0.5 * (dof + 1.0) * math.log1p(z * z / dof)
    return -0.5 * z * z


@numba.njit(cache=True)
def _mcmc_chain(profiles, g0, step, b_init, bbar_init, tau_init, is_t, dof, mu_b, s2_b,
                s2_tau, fixed_tau, total, burn, thin, target, seed):
    np.random.seed(seed)
    m = profiles.shape[0]
    b = b_init.copy()
    bbar = bbar_init
    tau = tau_init
    lp = np.empty(m)  # profile log-likelihood at b_i
    lh = np.empty(m)  # hierarchical kernel at b_i
    for i in range(m):
        lp[i] = _interp(profiles[i], g0, step, b[i])
        lh[i] = _log_kernel(b[i], bbar, tau, is_t, dof)
    sb = np.full(m, 0.1)
    s_bbar, s_tau, s_shift, s_scale = 0.1, 0.3, 0.05, 0.1
    acc_b = np.zeros(m)
    acc = np.zeros(4)
    n_keep = (total - burn) // thin
    out_bbar = np.empty(n_keep)
    out_tau = np.empty(n_keep)
    k = 0
    batch = 50
    new_lh = np.empty(m)
    new_lp = np.empty(m)
    for it in range(total):
        # 1. each b_i
        for i in range(m):
            prop = b[i] + sb[i] * np.random.standard_normal()
            lpi = _interp(profiles[i], g0, step, prop)
            lhi = _log_kernel(prop, bbar, tau, is_t, dof)
            if math.log(np.random.random()) < lpi + lhi - lp[i] - lh[i]:
                b[i], lp[i], lh[i] = prop, lpi, lhi
                acc_b[i] += 1
        # 2. b_bar
        prop = bbar + s_bbar * np.random.standard_normal()
        diff = 0.0
        for i in range(m):
            new_lh[i] = _log_kernel(b[i], prop, tau, is_t, dof)
            diff += new_lh[i] - lh[i]
        ratio = diff - 0.5 * ((prop - mu_b) ** 2 - (bbar - mu_b) ** 2) / s2_b
        if math.log(np.random.random()) < ratio:
            bbar = prop
            lh[:] = new_lh
            acc[0] += 1
        # 3. translate b_bar and every b_i together (hierarchical term unchanged)
        d = s_shift * np.random.standard_normal()
        diff = 0.0
        for i in range(m):
            new_lp[i] = _interp(profiles[i], g0, step, b[i] + d)
            diff += new_lp[i] - lp[i]
        ratio = diff - 0.5 * ((bbar + d - mu_b) ** 2 - (bbar - mu_b) ** 2) / s2_b
        if math.log(np.random.random()) < ratio:
            for i in range(m):
                b[i] += d
            bbar += d
            lp[:] = new_lp
            acc[1] += 1
        if not fixed_tau:
            # 4. log tau random walk; the density of log tau carries a +log tau Jacobian
            e = s_tau * np.random.standard_normal()
            prop = tau * math.exp(e)
            diff = 0.0
            for i in range(m):
                new_lh[i] = _log_kernel(b[i], bbar, prop, is_t, dof)
                diff += new_lh[i] - lh[i]
            ratio = diff - m * e - 0.5 * (prop * prop - tau * tau) / s2_tau + e
            if math.log(np.random.random()) < ratio:
                tau = prop
                lh[:] = new_lh
                acc[2] += 1
            # 5. scale every deviation b_i - b_bar by the same factor as tau; the
            # standardized deviations, hence the kernel, are unchanged and the
            # -m log tau term cancels the m log f Jacobian
            e = s_scale * np.random.standard_normal()
            f = math.exp(e)
            prop = tau * f
            diff = 0.0
            for i in range(m):
                new_lp[i] = _interp(profiles[i], g0, step, bbar + (b[i] - bbar) * f)
                diff += new_lp[i] - lp[i]
            ratio = diff - 0.5 * (prop * prop - tau * tau) / s2_tau + e
            if math.log(np.random.random()) < ratio:
                for i in range(m):
                    b[i] = bbar + (b[i] - bbar) * f
                tau = prop
                lp[:] = new_lp
                acc[3] += 1
        # step-size adaptation only during burn-in
        if it < burn and (it + 1) % batch == 0:
            rate = min(0.5, 5.0 / math.sqrt((it + 1) / batch))
            for i in range(m):
                sb[i] *= math.exp(rate * (acc_b[i] / batch - target))
                acc_b[i] = 0.0
            s_bbar *= math.exp(rate * (acc[0] / batch - target))
            s_shift *= math.exp(rate * (acc[1] / batch - target))
            s_tau *= math.exp(rate * (acc[2] / batch - target))
            s_scale *= math.exp(rate * (acc[3] / batch - target))
            acc[:] = 0.0
        if it >= burn and (it - burn + 1) % thin == 0 and k < n_keep:
            out_bbar[k] = bbar
            out_tau[k] = tau
            k += 1
    return out_bbar, out_tau


# ---------------------------------------------------------------------------
# diagnostics


def split_rhat(x: np.ndarray) -> float:
    """Split-chain potential scale reduction for an array of shape (chains, draws)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[1] // 2
    if n < 2:
        return float("nan")
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)
    w = halves.var(axis=1, ddof=1).mean()
    b = n * halves.mean(axis=1).var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else float("inf")
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def effective_sample_size(x: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial monotone positive sequence."""
    x = np.asarray(x, dtype=float)
    m, n = x.shape
    centered = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(centered, n=2 * n, axis=1)
    acov = np.fft.irfft(f * np.conj(f), axis=1)[:, :n] / n
    w = acov[:, 0].mean() * n / (n - 1)
    var_plus = w * (n - 1) / n + (x.mean(axis=1).var(ddof=1) if m > 1 else 0.0)
    if var_plus == 0:
        return float(m * n)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total, prev = 0.0, np.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
    tau_int = -1.0 + 2.0 * total
    return float(m * n / max(tau_int, 1.0 / np.log10(m * n)))


# ---------------------------------------------------------------------------
# posterior objects


@dataclass(frozen=True)
class BiasPosterior:
    """Retained (b_bar, tau) draws with shape (chains, draws) and diagnostics."""

    b_bar: np.ndarray
    tau: np.ndarray
    model: BiasModelSpec
    rhat: dict = field(default_factory=dict)
    ess: dict = field(default_factory=dict)
    flagged: bool = False
    n_controls: int = 0
    look: int | None = None

    @classmethod
    def point_mass(cls, value: float = 0.0, n_samples: int = 4000,
                   model: BiasModelSpec | None = None) -> "BiasPosterior":
        """Degenerate posterior whose predictive is exactly ``value``."""
        return cls(np.full((1, n_samples), float(value)), np.zeros((1, n_samples)),
                   model or BiasModelSpec("normal"), {"b_bar": 1.0, "tau": 1.0},
                   {"b_bar": float(n_samples), "tau": float(n_samples)})

    @property
    def n_samples(self) -> int:
        return self.b_bar.size

    def predictive(self, rng: np.random.Generator) -> np.ndarray:
        """One bias draw per retained (b_bar, tau) pair."""
        mu, tau = self.b_bar.ravel(), self.tau.ravel()
        if self.model.family == "t":
            z = rng.standard_t(self.model.t_dof, size=mu.size)
        else:
            z = rng.standard_normal(mu.size)
        return mu + tau * z

    def predictive_density(self, grid: np.ndarray = GRID, max_draws: int = 2000) -> np.ndarray:
        """Posterior predictive density of b on a grid (mixture over retained draws)."""
        mu, tau = self.b_bar.ravel(), self.tau.ravel()
        idx = np.linspace(0, mu.size - 1, min(max_draws, mu.size)).astype(int)
        mu, tau = mu[idx], np.maximum(tau[idx], 1e-6)
        z = (grid[:, None] - mu[None, :]) / tau[None, :]
        if self.model.family == "t":
            dens = stats.t.pdf(z, self.model.t_dof) / tau
        else:
            dens = stats.norm.pdf(z) / tau
        return dens.mean(axis=1)

    def prob_positive(self, rng: np.random.Generator) -> float:
        return float(np.mean(self.predictive(rng) > 0))


def _normal_approximation(p: LikelihoodProfile) -> np.ndarray:
    if not p.estimable:
        return np.asarray(p.loglik)
    se = p.curvature_se()
    return -0.5 * ((p.grid - p.mle) / se) ** 2


def check_evidence(nc_profiles: Sequence[LikelihoodProfile]) -> None:
    """Raise :class:`InsufficientEvidence` if the bias model should not be fit."""
    n_estimable = sum(p.estimable for p in nc_profiles)
    if n_estimable < 2:
        raise InsufficientEvidence(f"only {n_estimable} estimable negative controls")
    if max((p.event_counts[0] for p in nc_profiles), default=0) < 2:
        raise InsufficientEvidence("maximum negative-control risk count is below 2")


def fit_bias_model(nc_profiles: Sequence[LikelihoodProfile], model: BiasModelSpec = BiasModelSpec(),
                   mcmc: McmcSpec = McmcSpec(), *, control_ids: Sequence | None = None,
                   stream: RandomStream | None = None, fixed_tau: float | None = None,
                   normal_approximation: bool = False, require_evidence: bool = True,
                   rhat_limit: float = 1.1) -> BiasPosterior:
    """Sample the hierarchical bias model from negative-control profiles.

    Controls are ordered by ``control_ids`` (default: input position) before
    sampling, so permuting the input together with its ids changes nothing.
    ``fixed_tau`` pins tau (used for conjugacy checks); ``normal_approximation``
    swaps each estimable profile for a quadratic at its MLE.
    """
    profiles = list(nc_profiles)
    if require_evidence:
        check_evidence(profiles)
    if len(profiles) < 1:
        raise InsufficientEvidence("no negative controls")
    ids = list(range(len(profiles))) if control_ids is None else list(control_ids)
    if len(ids) != len(profiles) or len(set(ids)) != len(ids):
        raise ValueError("control_ids must be unique, one per profile")
    order = sorted(range(len(profiles)), key=lambda j: ids[j])
    profiles = [profiles[j] for j in order]
    grid = profiles[0].grid
    if any(p.grid is not grid and not np.array_equal(p.grid, grid) for p in profiles):
        raise ValueError("all profiles must share one grid")
    step = float(grid[1] - grid[0])
    mat = np.stack([_normal_approximation(p) if normal_approximation else np.asarray(p.loglik)
                    for p in profiles])
    mat = np.ascontiguousarray(mat, dtype=np.float64)
    start = np.clip([p.argmax() for p in profiles], grid[1], grid[-2])
    stream = stream or RandomStream(mcmc.seed, ("bias",))
    b_draws, t_draws = [], []
    for c in range(mcmc.chains):
        cs = stream.child("chain", c)
        rng = cs.generator()
        b0 = np.clip(start + 0.05 * rng.standard_normal(len(start)), grid[1], grid[-2])
        tau0 = fixed_tau if fixed_tau is not None else float(np.clip(
            np.std(start) * np.exp(0.2 * rng.standard_normal()), 0.05, 1.5))
        bb, tt = _mcmc_chain(mat, float(grid[0]), step, b0, float(np.mean(b0)), float(tau0),
                             model.family == "t", float(model.t_dof), model.mu_b, model.sigma2_b,
                             model.sigma2_tau, fixed_tau is not None, mcmc.total_iterations,
                             mcmc.burn_in, mcmc.thin, mcmc.target_acceptance, cs.int32_seed())
        b_draws.append(bb)
        t_draws.append(tt)
    b_bar, tau = np.stack(b_draws), np.stack(t_draws)
    rhat = {"b_bar": split_rhat(b_bar), "tau": split_rhat(tau) if fixed_tau is None else 1.0}
    ess = {"b_bar": effective_sample_size(b_bar),
           "tau": effective_sample_size(tau) if fixed_tau is None else float(tau.size)}
    flagged = bool(mcmc.chains > 1 and any(not r <= rhat_limit for r in rhat.values()))
    return BiasPosterior(b_bar, tau, model, rhat, ess, flagged, len(profiles),
                         profiles[0].look)


@dataclass(frozen=True)
class DebiasedPosterior:
    samples: np.ndarray
    p_h1_hat: float
    median: float
    ci95: tuple[float, float]
    flagged: bool = False
    look: int | None = None

    @classmethod
    def from_samples(cls, samples: np.ndarray, flagged: bool = False,
                     look: int | None = None) -> "DebiasedPosterior":
        lo, med, hi = np.quantile(samples, [0.025, 0.5, 0.975])
        return cls(samples, float(np.mean(samples > 0)), float(med), (float(lo), float(hi)),
                   flagged, look)


def debias(outcome_profile: LikelihoodProfile, prior: PriorSpec, bias: BiasPosterior,
           stream: RandomStream | None = None,
           biased_posterior: GridPosterior | None = None,
           rng: np.random.Generator | None = None) -> DebiasedPosterior:
    """Subtract predictive bias draws from draws of the biased-effect posterior.

    Draws come from ``rng`` when given (callers de-biasing many outcomes in a
    fixed order can share one generator), otherwise from ``stream``.
    """
    post = biased_posterior or posterior(outcome_profile, prior)
    if rng is None:
        stream = stream or RandomStream(0, ("debias",))
        rng = stream.generator()
    beta_tilde = post.sample(bias.n_samples, rng)
    b = bias.predictive(rng)
    return DebiasedPosterior.from_samples(beta_tilde - b, bias.flagged, outcome_profile.look)


@dataclass(frozen=True)
class BbcLook:
    look: int
    bias: BiasPosterior | None
    posterior: DebiasedPosterior | None
    skipped: str | None = None


def sequential_bbc(outcome_profiles: Sequence[LikelihoodProfile],
                   nc_profiles_by_look: Sequence[Sequence[LikelihoodProfile]] | None,
                   prior: PriorSpec, model: BiasModelSpec, mcmc: McmcSpec, delta1: float,
                   stream: RandomStream | None = None, stop: bool = True,
                   ) -> tuple[SequentialDecision, list[BbcLook]]:
    """Refit the bias model at every look, de-bias the outcome, apply the delta1 rule.

    Looks where the negative controls fail the evidence check are recorded
    as skipped and cannot signal. With no negative controls at all the
    procedure is plain Bayesian monitoring with the bias fixed at 0.
    """
    stream = stream or RandomStream(mcmc.seed, ("bbc",))
    looks, stats_, details = [], [], []
    for t, prof in enumerate(outcome_profiles, 1):
        look = prof.look if prof.look is not None else t
        looks.append(look)
        if not nc_profiles_by_look:
            post = posterior(prof, prior)
            dp = DebiasedPosterior(np.empty(0), post.p_h1, post.median, post.ci95, False, look)
            details.append(BbcLook(look, None, dp))
            stats_.append(dp.p_h1_hat)
            continue
        try:
            bias = fit_bias_model(nc_profiles_by_look[t - 1], model, mcmc,
                                  stream=stream.child("look", look, "fit"))
        except InsufficientEvidence as exc:
            details.append(BbcLook(look, None, None, str(exc)))
            stats_.append(float("nan"))
            continue
        dp = debias(prof, prior, bias, stream.child("look", look, "debias"))
        details.append(BbcLook(look, bias, dp))
        stats_.append(dp.p_h1_hat)
    decision = SequentialDecision.first_crossing("bbc", looks, stats_, delta1, stop)
    if decision.stopping_time is not None and stop:
        details = details[: len(decision.records)]
    return decision, details
