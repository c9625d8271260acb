"""Simulation experiments comparing the sequential methods.

* :func:`run_schedule_experiment` - MaxSPRT under three planned surveillance
  lengths on the same null data.
* :func:`run_confounding_experiment` - historical comparator vs SCCS estimates
  when the historical rate is too low and uptake follows the season.
* :func:`run_clean_bayes_experiment` - plain Bayesian monitoring of a true
  RR = 2 without confounding.
* :func:`run_control_experiment` - negative/positive controls with injected
  bias, scored for MaxSPRT, plain Bayes and bias-corrected Bayes.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .bayes import PriorSpec, posterior, run_bayes
from .bias import (BiasModelSpec, InsufficientEvidence, McmcSpec, debias,
                   fit_bias_model)
from .designs import DesignSpec, LikelihoodProfile, poisson_profile, profile
from .evaluation import (ControlSuite, MetricTable, estimation_summary, first_crossing,
                         testing_rows)
from .maxsprt import (SurveillanceSchedule, compute_cv, llr_statistic, run_maxsprt)
from .rng import RandomStream
from .simulation import (ScenarioConfig, accrue, draw_cohort, month_cutoffs, seasonal_curve,
                         seasonal_uptake, simulate_population)

log = logging.getLogger(__name__)


def _map(fn, items, jobs: int):
    if jobs and jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# planned surveillance length


@dataclass(frozen=True)
class ScheduleExperiment:
    n_seeds: int = 500
    n_looks: int = 24
    expected_per_look: float = 10.0
    planned: dict = field(default_factory=lambda: {"hacky": 12, "oracle": 24, "early": 36})
    alpha: float = 0.05
    cv_replicates: int = 100_000
    master_seed: int = 0


def run_schedule_experiment(cfg: ScheduleExperiment = ScheduleExperiment()) -> dict:
    """Cumulative Type 1 per look for each planned length, on shared null data.

    Returns ``{"cv": {plan: cv}, "type1": {plan: array(n_looks)}}``.
    """
    root = RandomStream(cfg.master_seed, ("schedule",))
    cvs = {}
    for plan, looks in cfg.planned.items():
        sched = SurveillanceSchedule(looks, cfg.expected_per_look, cfg.alpha)
        cvs[plan] = compute_cv(sched, "poisson", cfg.cv_replicates, root.child("cv", looks)).cv
    stopping = {plan: [] for plan in cfg.planned}
    for seed in range(cfg.n_seeds):
        rng = root.child("data", seed).generator()
        counts = np.cumsum(rng.poisson(cfg.expected_per_look, cfg.n_looks))
        expected = cfg.expected_per_look * np.arange(1, cfg.n_looks + 1)
        profiles = [poisson_profile(c, mu, look=t)
                    for t, (c, mu) in enumerate(zip(counts, expected), 1)]
        for plan, cv in cvs.items():
            d = run_maxsprt(profiles, cv)
            stopping[plan].append(-1 if d.stopping_time is None else d.stopping_time - 1)
    looks = np.arange(cfg.n_looks)
    type1 = {}
    for plan, st in stopping.items():
        st = np.array(st)
        type1[plan] = ((st[None, :] >= 0) & (st[None, :] <= looks[:, None])).mean(axis=1)
    return {"cv": cvs, "type1": type1}


# ---------------------------------------------------------------------------
# confounded historical comparator vs SCCS


def confounded_scenario(n_subjects: int = 5000, true_rr: float = 2.0, seed: int = 0,
                        mean_weekly_rate: float = 0.002, amplitude: float = 0.5,
                        coverage: float = 0.6, historical_rate_multiplier: float = 0.5,
                        peak_week: float = 1.0) -> ScenarioConfig:
    """Seasonal incidence, uptake with the same seasonal shape, low historical rate."""
    return ScenarioConfig(
        n_subjects=n_subjects,
        baseline_log_rate=seasonal_curve(math.log(mean_weekly_rate), amplitude, peak_week),
        uptake_curve=seasonal_uptake(coverage, amplitude, peak_week),
        true_log_rr=math.log(true_rr),
        historical_rate_multiplier=historical_rate_multiplier,
        master_seed=seed)


CONFOUNDING_DESIGNS = ("hc_unadjusted_tar42", "hc_week_of_year_tar42",
                       "sccs_excl_pre30_tar42", "sccs_month_adjusted_tar42")


def run_confounding_experiment(n_seeds: int = 100, master_seed: int = 0,
                               designs=CONFOUNDING_DESIGNS, jobs: int = 1,
                               **scenario) -> dict:
    """Monthly MLE of the RR (NaN when not estimable) per design: shape (seeds, 12)."""
    tasks = [(master_seed, s, tuple(designs), scenario) for s in range(n_seeds)]
    out = _map(_confounding_seed, tasks, jobs)
    return {d: np.array([o[d] for o in out]) for d in designs}


def _confounding_seed(task):
    master_seed, seed, designs, scenario = task
    cfg = confounded_scenario(seed=seed, **scenario)
    pop = simulate_population(cfg, RandomStream(master_seed, ("confounding", seed)))
    snaps = accrue(pop, month_cutoffs())
    res = {}
    for name in designs:
        spec = DesignSpec.from_name(name)
        res[name] = np.exp([profile(s, spec).mle for s in snaps])
    return res


# ---------------------------------------------------------------------------
# clean scenario, plain Bayes


def clean_scenario(n_subjects: int = 5000, true_rr: float = 2.0, weekly_rate: float = 0.00025,
                   coverage: float = 0.6, seed: int = 0) -> ScenarioConfig:
    """Flat incidence, uniform uptake, historical rate equal to the present rate."""
    return ScenarioConfig(
        n_subjects=n_subjects, baseline_log_rate=np.full(52, math.log(weekly_rate)),
        uptake_curve=np.full(52, coverage / 52), true_log_rr=math.log(true_rr),
        historical_rate_multiplier=1.0, master_seed=seed)


def run_clean_bayes_experiment(n_seeds: int = 50, master_seed: int = 0, delta1: float = 0.95,
                               prior: PriorSpec = PriorSpec(4.0),
                               design: str = "hc_unadjusted_tar42", **scenario) -> dict:
    """Per seed: monthly posterior sd, p_h1, median, and the signal month (or None)."""
    spec = DesignSpec.from_name(design)
    sd, p1, med, signal = [], [], [], []
    for seed in range(n_seeds):
        cfg = clean_scenario(seed=seed, **scenario)
        pop = simulate_population(cfg, RandomStream(master_seed, ("clean", seed)))
        posts = [posterior(profile(s, spec), prior) for s in accrue(pop, month_cutoffs())]
        sd.append([p.sd for p in posts])
        p1.append([p.p_h1 for p in posts])
        med.append([p.median for p in posts])
        signal.append(run_bayes(posts, delta1).stopping_time)
    return {"sd": np.array(sd), "p_h1": np.array(p1), "median": np.array(med),
            "signal_month": signal}


# ---------------------------------------------------------------------------
# negative / positive control sweep


@dataclass(frozen=True)
class ControlExperiment:
    """Negative controls with injected exchangeable bias and synthesized positives."""

    n_seeds: int = 100
    master_seed: int = 0
    n_subjects: int = 2000
    suite: ControlSuite = ControlSuite()
    rate_low: float = 0.001
    rate_high: float = 0.01
    seasonal_amplitude: float = 0.3
    peak_week: float = 1.0
    coverage: float = 0.7
    historical_rate_multiplier: float = 0.8
    risk_window_weeks: int = 6
    n_looks: int = 12
    designs: tuple[str, ...] = ("hc_unadjusted_tar42", "sccs_excl_pre30_tar42")
    prior_variances: tuple[float, ...] = (4.0,)
    thresholds: tuple[float, ...] = (0.8, 0.9, 0.95)
    alpha: float = 0.05
    cv_replicates: int = 10_000
    bias_model: BiasModelSpec = BiasModelSpec("t")
    mcmc: McmcSpec = McmcSpec(total_iterations=3000, burn_in=500, thin=5, chains=4)


@dataclass
class ControlResult:
    """Per-look outputs, arrays indexed (seed, design, [prior,] control, look).

    ``maxsprt_cv`` is indexed (seed, design, control); positive controls reuse
    their parent's value. BBC statistics are NaN at looks skipped for lack of
    negative-control evidence.
    """

    experiment: ControlExperiment
    truth: np.ndarray  # (seed, control) true log RR snapped to the grid
    true_rr: np.ndarray  # (control,)
    estimable: np.ndarray
    mle: np.ndarray
    mle_lo: np.ndarray
    mle_hi: np.ndarray
    llr: np.ndarray
    maxsprt_cv: np.ndarray
    bayes_p1: np.ndarray
    bayes_med: np.ndarray
    bayes_lo: np.ndarray
    bayes_hi: np.ndarray
    bbc_p1: np.ndarray
    bbc_med: np.ndarray
    bbc_lo: np.ndarray
    bbc_hi: np.ndarray
    bias_rhat: np.ndarray  # (seed, design, look) max split-R-hat, NaN if skipped
    bias_p_positive: np.ndarray  # (seed, design, look) predictive P(b > 0)

    @property
    def negatives(self) -> np.ndarray:
        return self.true_rr == 1.0

    def first_signal(self, method: str, design: int, prior: int = 0,
                     delta1: float | None = None) -> np.ndarray:
        """(seed, control) first 0-based signal look, -1 if none."""
        if method == "maxsprt":
            return first_crossing(self.llr[:, design], self.maxsprt_cv[:, design])
        stats = {"bayes": self.bayes_p1, "bbc": self.bbc_p1}[method][:, design, prior]
        return first_crossing(stats, delta1)

    def estimates(self, method: str, design: int, prior: int = 0):
        if method == "maxsprt":
            return self.mle[:, design], self.mle_lo[:, design], self.mle_hi[:, design]
        if method == "bayes":
            return (self.bayes_med[:, design, prior], self.bayes_lo[:, design, prior],
                    self.bayes_hi[:, design, prior])
        return (self.bbc_med[:, design, prior], self.bbc_lo[:, design, prior],
                self.bbc_hi[:, design, prior])

    def metric_table(self, bbc_thresholds: dict | None = None) -> MetricTable:
        """Testing and estimation metrics for every method, design, prior and threshold.

        ``bbc_thresholds`` maps design names to extra calibrated BBC thresholds
        to report (e.g. one matched to MaxSPRT's Type 1).
        """
        ex = self.experiment
        table = MetricTable()
        n_looks = ex.n_looks
        for d, dname in enumerate(ex.designs):
            cells = [("maxsprt", None, None)]
            for p, var in enumerate(ex.prior_variances):
                deltas = list(ex.thresholds) + list((bbc_thresholds or {}).get(dname, []))
                cells += [("bayes", p, t) for t in ex.thresholds]
                cells += [("bbc", p, t) for t in deltas]
            for method, p, delta in cells:
                key = dict(method=method, design=dname,
                           prior="NA" if p is None else PriorSpec(ex.prior_variances[p]).label,
                           delta1=delta)
                first = self.first_signal(method, d, p or 0, delta)
                before = len(table.rows)
                testing_rows(table, first, np.broadcast_to(self.true_rr, first.shape),
                             n_looks, **key)
                est, lo, hi = self.estimates(method, d, p or 0)
                for row in table.rows[before:]:
                    t = row["look"] - 1
                    sel = self.true_rr == row["true_rr"]
                    mse, cov, ne = estimation_summary(
                        est[:, sel, t].ravel(), lo[:, sel, t].ravel(), hi[:, sel, t].ravel(),
                        self.truth[:, sel].ravel(), self.estimable[:, d, sel, t].ravel())
                    row.update(mse=mse, coverage95=cov, non_estimable_rate=ne)
        return table


def control_scenario(ex: ControlExperiment, rate: float, log_bias: float,
                     seed: int) -> ScenarioConfig:
    return ScenarioConfig(
        n_subjects=ex.n_subjects,
        baseline_log_rate=seasonal_curve(math.log(rate), ex.seasonal_amplitude, ex.peak_week),
        uptake_curve=seasonal_uptake(ex.coverage, ex.seasonal_amplitude, ex.peak_week),
        true_log_rr=log_bias, historical_rate_multiplier=ex.historical_rate_multiplier,
        risk_window_weeks=ex.risk_window_weeks, master_seed=seed)


def expected_null_count(p: LikelihoodProfile) -> float:
    """Expected risk-window count under beta = 0, from the score at 0.

    For the Poisson profile ``c beta - mu e^beta`` the score at 0 is
    ``c - mu``; for the conditional SCCS profile it is
    ``c_r - sum_i n_i T_r / (T_r + T_c)``. Either way
    ``expected = c - score(0)``.
    """
    g = p.grid
    i = int(np.searchsorted(g, 0.0))
    score = (p.loglik[i + 1] - p.loglik[i - 1]) / (g[i + 1] - g[i - 1])
    return max(float(p.event_counts[0] - score), 0.0)


def simulate_control_profiles(ex: ControlExperiment, seed: int):
    """Negative-control profiles (design, control, look) plus the drawn rates and biases."""
    root = RandomStream(ex.master_seed, ("controls", seed))
    suite_rng = root.child("suite").generator()
    rates = np.exp(suite_rng.uniform(math.log(ex.rate_low), math.log(ex.rate_high),
                                      ex.suite.n_negative))
    biases = ex.suite.draw_biases(suite_rng)
    base = control_scenario(ex, rates[0], 0.0, seed)
    cohort = draw_cohort(base, root)
    cutoffs = month_cutoffs(ex.n_looks)
    specs = [DesignSpec.from_name(n) for n in ex.designs]
    profiles = [[None] * ex.suite.n_negative for _ in specs]
    for j in range(ex.suite.n_negative):
        cfg = control_scenario(ex, rates[j], biases[j], seed)
        pop = simulate_population(cfg, root.child("outcome", j), cohort=cohort)
        snaps = accrue(pop, cutoffs)
        for d, spec in enumerate(specs):
            profiles[d][j] = [profile(s, spec) for s in snaps]
    return profiles, rates, biases


def _control_seed(task) -> dict:
    ex, seed = task
    root = RandomStream(ex.master_seed, ("controls", seed))
    nc_profiles, _, biases = simulate_control_profiles(ex, seed)
    suite = ex.suite
    n_d, n_p, n_c, n_t = len(ex.designs), len(ex.prior_variances), suite.n_controls, ex.n_looks
    parents = suite.parents
    rrs = np.array(suite.rrs)
    shape3, shape4 = (n_d, n_c, n_t), (n_d, n_p, n_c, n_t)
    out = {k: np.full(shape3, np.nan) for k in ("mle", "mle_lo", "mle_hi", "llr")}
    out["estimable"] = np.zeros(shape3, dtype=bool)
    out["maxsprt_cv"] = np.full((n_d, n_c), np.inf)
    for k in ("bayes_p1", "bayes_med", "bayes_lo", "bayes_hi",
              "bbc_p1", "bbc_med", "bbc_lo", "bbc_hi"):
        out[k] = np.full(shape4, np.nan)
    out["bias_rhat"] = np.full((n_d, n_t), np.nan)
    out["bias_p_positive"] = np.full((n_d, n_t), np.nan)
    truth = None
    priors = [PriorSpec(v) for v in ex.prior_variances]
    for d, dname in enumerate(ex.designs):
        # critical value per negative control from its own null expected counts
        for j in range(suite.n_negative):
            mu = np.array([expected_null_count(p) for p in nc_profiles[d][j]])
            inc = np.clip(np.diff(mu, prepend=0.0), 0.0, None)
            if inc.sum() > 0:
                sched = SurveillanceSchedule(n_t, tuple(inc), ex.alpha)
                out["maxsprt_cv"][d, j] = compute_cv(
                    sched, "poisson", ex.cv_replicates, root.child("cv", dname, j)).cv
        out["maxsprt_cv"][d] = out["maxsprt_cv"][d, parents]
        for t in range(n_t):
            ncs = [nc_profiles[d][j][t] for j in range(suite.n_negative)]
            controls = suite.expand(ncs)
            if truth is None:
                truth = np.array([p.shift for p in controls])
            try:
                bias = fit_bias_model(ncs, ex.bias_model, ex.mcmc,
                                      stream=root.child("bias", dname, t))
                out["bias_rhat"][d, t] = max(bias.rhat.values())
                out["bias_p_positive"][d, t] = bias.prob_positive(
                    root.child("bias_pp", dname, t).generator())
            except InsufficientEvidence:
                bias = None
            rngs = [root.child("debias", dname, p, t).generator() for p in range(n_p)]
            for c, prof in enumerate(controls):
                out["estimable"][d, c, t] = prof.estimable
                out["llr"][d, c, t] = llr_statistic(prof)
                if prof.estimable:
                    out["mle"][d, c, t] = prof.mle
                    out["mle_lo"][d, c, t], out["mle_hi"][d, c, t] = prof.confidence_interval()
                for p, prior in enumerate(priors):
                    post = posterior(prof, prior)
                    out["bayes_p1"][d, p, c, t] = post.p_h1
                    out["bayes_med"][d, p, c, t] = post.median
                    out["bayes_lo"][d, p, c, t], out["bayes_hi"][d, p, c, t] = post.ci95
                    if bias is None:
                        continue
                    dp = debias(prof, prior, bias, biased_posterior=post, rng=rngs[p])
                    out["bbc_p1"][d, p, c, t] = dp.p_h1_hat
                    out["bbc_med"][d, p, c, t] = dp.median
                    out["bbc_lo"][d, p, c, t], out["bbc_hi"][d, p, c, t] = dp.ci95
    out["truth"] = truth
    out["true_rr"] = rrs
    return out


def run_control_experiment(ex: ControlExperiment = ControlExperiment(), jobs: int = 1,
                           seeds=None) -> ControlResult:
    seeds = range(ex.n_seeds) if seeds is None else seeds
    per_seed = _map(_control_seed, [(ex, s) for s in seeds], jobs)
    stacked = {k: np.stack([r[k] for r in per_seed]) for k in per_seed[0] if k != "true_rr"}
    return ControlResult(ex, true_rr=per_seed[0]["true_rr"], **stacked)
