"""Log-likelihood profiles for the log rate ratio under two design families.

Every design reduces a :class:`~seqsafety.simulation.LookSnapshot` to a
:class:`LikelihoodProfile`: the log-likelihood of beta on one shared grid,
shifted so its maximum is 0. Profiles are the interchange object consumed by
MaxSPRT, the Bayesian posterior and the bias model.

Historical comparator variants compare the at-risk count against an expected
count from the historical rate (Poisson likelihood). SCCS / SCRI variants
condition on each case's total count (conditional Poisson likelihood), which
removes subject-level effects.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .simulation import WEEKS_PER_YEAR, LookSnapshot, month_of_week

GRID = np.linspace(-4.0, 4.0, 1001)
GRID.setflags(write=False)
GRID_STEP = float(GRID[1] - GRID[0])
CHI2_95_HALF = 1.920729410347062  # chi2(1).ppf(0.95) / 2


def _parabolic_peak(y: np.ndarray, i: int) -> tuple[float, float]:
    """Vertex offset (in grid steps) and value of the parabola through y[i-1..i+1]."""
    denom = y[i - 1] - 2.0 * y[i] + y[i + 1]
    if not denom < 0:
        return 0.0, float(y[i])
    delta = 0.5 * (y[i - 1] - y[i + 1]) / denom
    return float(delta), float(y[i] - 0.25 * (y[i - 1] - y[i + 1]) * delta)


@dataclass(frozen=True)
class LikelihoodProfile:
    """Log-likelihood of beta on a grid, normalized to a maximum of 0.

    ``mle`` is NaN when the maximizer sits within one grid step of an end
    point (``boundary``); ``estimable`` is False in that case and when the
    design has no risk or comparator information.
    """

    loglik: np.ndarray
    mle: float
    boundary: bool
    estimable: bool
    event_counts: tuple[int, int] = (0, 0)
    exposure: tuple[float, float] = (0.0, 0.0)
    design: str = ""
    look: int | None = None
    synthetic: bool = False
    shift: float = 0.0
    grid: np.ndarray = GRID

    @classmethod
    def from_loglik(cls, loglik, *, informative: bool = True, grid: np.ndarray = GRID,
                    **meta) -> "LikelihoodProfile":
        ll = np.asarray(loglik, dtype=float)
        if ll.shape != grid.shape:
            raise ValueError("loglik must match the grid")
        finite = np.isfinite(ll)
        if not finite.any():
            raise ValueError("profile is -inf everywhere")
        ll = ll - ll[finite].max()
        ll.setflags(write=False)
        i = int(np.nanargmax(np.where(finite, ll, -np.inf)))
        boundary = i <= 1 or i >= len(grid) - 2
        if boundary:
            mle = float("nan")
        else:
            delta, _ = _parabolic_peak(ll, i)
            mle = float(grid[i] + delta * (grid[1] - grid[0]))
        estimable = bool(informative and not boundary and finite.all())
        return cls(ll, mle, boundary, estimable, grid=grid, **meta)

    def argmax(self) -> float:
        """Grid maximizer, defined even for boundary profiles."""
        return float(self.grid[int(np.argmax(self.loglik))])

    def evaluate(self, beta) -> np.ndarray:
        """Linear interpolation; -inf outside the grid."""
        beta = np.asarray(beta, dtype=float)
        out = np.interp(beta, self.grid, self.loglik)
        return np.where((beta < self.grid[0]) | (beta > self.grid[-1]), -np.inf, out)

    def curvature_se(self) -> float:
        """Standard error from the second difference at the maximizer."""
        i = int(np.argmax(self.loglik))
        i = min(max(i, 1), len(self.grid) - 2)
        h = self.grid[1] - self.grid[0]
        d2 = (self.loglik[i - 1] - 2 * self.loglik[i] + self.loglik[i + 1]) / h**2
        return float(1.0 / np.sqrt(-d2)) if d2 < 0 else float("inf")

    def confidence_interval(self, level: float = 0.95) -> tuple[float, float]:
        """Likelihood-ratio interval {beta : loglik >= -chi2_1(level) / 2}.

        Ends are interpolated between grid points and clipped to the grid.
        """
        if level == 0.95:
            cut = -CHI2_95_HALF
        else:
            from scipy.stats import chi2

            cut = -0.5 * chi2.ppf(level, 1)
        inside = np.flatnonzero(self.loglik >= cut)
        lo_i, hi_i = inside[0], inside[-1]
        g, ll = self.grid, self.loglik

        def cross(a, b):
            return g[a] + (cut - ll[a]) * (g[b] - g[a]) / (ll[b] - ll[a])

        lo = g[0] if lo_i == 0 else cross(lo_i - 1, lo_i)
        hi = g[-1] if hi_i == len(g) - 1 else cross(hi_i, hi_i + 1)
        return float(lo), float(hi)


def poisson_profile(count: float, expected: float, grid: np.ndarray = GRID,
                    **meta) -> LikelihoodProfile:
    """Profile of ``count * beta - expected * exp(beta)``."""
    if expected < 0 or count < 0:
        raise ValueError("count and expected must be non-negative")
    ll = count * grid - expected * np.exp(grid)
    meta.setdefault("event_counts", (int(count), 0))
    meta.setdefault("exposure", (float(expected), 0.0))
    return LikelihoodProfile.from_loglik(ll, informative=count > 0 and expected > 0,
                                         grid=grid, **meta)


# ---------------------------------------------------------------------------
# design descriptors

HC_VARIANTS = ("unadjusted", "stratified", "week_of_year")
SCCS_VARIANTS = ("excl_pre30", "month_adjusted", "post_only", "scri_pre", "scri_post")

# offsets in weeks relative to the vaccination week, inclusive
_PRE_EXCLUSION = (-4, -1)  # 30 days before vaccination
_SCRI_CONTROL = {"scri_pre": (-6, -3), "scri_post": (7, 10)}  # 43-15 days pre, 43-71 days post


@dataclass(frozen=True)
class DesignSpec:
    """One epidemiological design variant.

    ``risk_window_weeks`` is 4 (days 1-28) or 6 (days 1-42).
    """

    family: str
    variant: str
    risk_window_weeks: int = 6

    def __post_init__(self):
        if self.family == "historical_comparator":
            if self.variant not in HC_VARIANTS:
                raise ValueError(f"unknown historical comparator variant {self.variant!r}")
        elif self.family == "sccs":
            if self.variant not in SCCS_VARIANTS:
                raise ValueError(f"unknown SCCS variant {self.variant!r}")
        else:
            raise ValueError(f"unknown design family {self.family!r}")
        if self.risk_window_weeks < 1:
            raise ValueError("risk_window_weeks must be >= 1")
        ci = self.control_interval
        if ci is not None and not (ci[1] < 1 or ci[0] > self.risk_window_weeks):
            raise ValueError("control interval overlaps the risk window")

    @property
    def adjustment(self) -> str:
        return {"stratified": "stratified", "week_of_year": "week_of_year",
                "month_adjusted": "month_effects"}.get(self.variant, "none")

    @property
    def control_interval(self) -> tuple[int, int] | None:
        return _SCRI_CONTROL.get(self.variant)

    @property
    def name(self) -> str:
        prefix = "hc" if self.family == "historical_comparator" else "sccs"
        return f"{prefix}_{self.variant}_tar{self.risk_window_weeks * 7}"

    @classmethod
    def from_name(cls, name: str) -> "DesignSpec":
        """Inverse of :attr:`name`, e.g. ``"hc_unadjusted_tar42"``."""
        prefix, rest = name.split("_", 1)
        variant, tar = rest.rsplit("_tar", 1)
        family = {"hc": "historical_comparator", "sccs": "sccs"}[prefix]
        return cls(family, variant, int(tar) // 7)


def standard_designs(risk_windows=(4, 6)) -> list[DesignSpec]:
    """All implemented variants for each risk window."""
    out = []
    for r in risk_windows:
        out += [DesignSpec("historical_comparator", v, r) for v in HC_VARIANTS]
        out += [DesignSpec("sccs", v, r) for v in SCCS_VARIANTS]
    return out


def profile(snapshot: LookSnapshot, spec: DesignSpec) -> LikelihoodProfile:
    if spec.family == "historical_comparator":
        return historical_comparator_profile(snapshot, spec)
    return sccs_profile(snapshot, spec)


# ---------------------------------------------------------------------------
# historical comparator


def _risk_weeks(snapshot: LookSnapshot, risk_window: int) -> np.ndarray:
    """(subjects, observed weeks) mask of at-risk weeks up to the cutoff."""
    v = snapshot.vaccination_week[:, None]
    weeks = np.arange(1, snapshot.cutoff_week + 1)[None, :]
    return (v > 0) & (weeks > v) & (weeks <= v + risk_window)


def historical_comparator_profile(snapshot: LookSnapshot, spec: DesignSpec) -> LikelihoodProfile:
    """Poisson profile of the at-risk count against the historical expectation."""
    if spec.family != "historical_comparator":
        raise ValueError("spec is not a historical comparator design")
    hist = snapshot.historical_counts
    n_subjects, n_hist = hist.shape
    if n_subjects * n_hist == 0:
        raise ValueError("historical person-time is zero")
    risk = _risk_weeks(snapshot, spec.risk_window_weeks)
    counts = snapshot.counts
    c = int(counts[risk].sum())
    if spec.variant == "unadjusted":
        mu = hist.sum() / (n_subjects * n_hist) * risk.sum()
    elif spec.variant == "stratified":
        mu = 0.0
        x = snapshot.covariate
        for level in np.unique(x):
            rows = x == level
            rate = hist[rows].sum() / (rows.sum() * n_hist)
            mu += rate * risk[rows].sum()
    else:
        woy = (np.arange(snapshot.cutoff_week) % WEEKS_PER_YEAR)
        hist_woy = np.zeros(WEEKS_PER_YEAR)
        np.add.at(hist_woy, np.arange(n_hist) % WEEKS_PER_YEAR, hist.sum(axis=0))
        exposure_woy = np.zeros(WEEKS_PER_YEAR)
        np.add.at(exposure_woy, np.arange(n_hist) % WEEKS_PER_YEAR, n_subjects)
        rate = hist_woy / exposure_woy
        mu = float((risk.sum(axis=0) * rate[woy]).sum())
    return poisson_profile(c, float(mu), event_counts=(c, int(hist.sum())),
                           exposure=(float(mu), float(n_subjects * n_hist)),
                           design=spec.name, look=snapshot.look_index)


# ---------------------------------------------------------------------------
# SCCS / SCRI

_EXCLUDED, _CONTROL, _RISK = 0, 1, 2


def _sccs_categories(snapshot: LookSnapshot, spec: DesignSpec) -> np.ndarray:
    """Category (excluded / control / risk) for each subject and observed surveillance week."""
    first = snapshot.config.surveillance_weeks[0]
    weeks = np.arange(first, snapshot.cutoff_week + 1)[None, :]
    v = snapshot.vaccination_week[:, None]
    vaccinated = v > 0
    rel = weeks - v
    risk = vaccinated & (rel >= 1) & (rel <= spec.risk_window_weeks)
    cat = np.full(risk.shape, _EXCLUDED, dtype=np.int8)
    if spec.variant in ("excl_pre30", "month_adjusted"):
        pre = vaccinated & (rel >= _PRE_EXCLUSION[0]) & (rel <= _PRE_EXCLUSION[1])
        cat[~pre] = _CONTROL
    elif spec.variant == "post_only":
        cat[vaccinated & (rel >= 0)] = _CONTROL
    else:
        lo, hi = spec.control_interval
        cat[vaccinated & (rel >= lo) & (rel <= hi)] = _CONTROL
    cat[risk] = _RISK
    return cat


def _pair_loglik(c_risk: float, t_risk: np.ndarray, t_ctrl: np.ndarray, n: np.ndarray,
                 grid: np.ndarray) -> np.ndarray:
    """c_r * beta - sum_i n_i log(T_ri e^beta + T_ci), grouped by (T_r, T_c) pairs."""
    pairs, inverse = np.unique(np.stack([t_risk, t_ctrl], axis=1), axis=0, return_inverse=True)
    weight = np.bincount(inverse.ravel(), weights=n, minlength=len(pairs))
    with np.errstate(divide="ignore"):
        log_tr, log_tc = np.log(pairs[:, 0].astype(float)), np.log(pairs[:, 1].astype(float))
    log_denom = np.logaddexp(log_tr[None, :] + grid[:, None], log_tc[None, :])
    return c_risk * grid - log_denom @ weight


def sccs_profile(snapshot: LookSnapshot, spec: DesignSpec) -> LikelihoodProfile:
    """Conditional Poisson profile over cases observed in the surveillance period."""
    if spec.family != "sccs":
        raise ValueError("spec is not an SCCS design")
    cat = _sccs_categories(snapshot, spec)
    y = snapshot.surveillance_counts
    used = cat != _EXCLUDED
    n = (y * used).sum(axis=1)
    cases = n > 0
    t_risk = (cat == _RISK).sum(axis=1)
    t_ctrl = (cat == _CONTROL).sum(axis=1)
    c_risk = ((cat == _RISK) * y).sum(axis=1)
    informative = cases & (t_risk > 0) & (t_ctrl > 0)
    meta = dict(event_counts=(int(c_risk[informative].sum()),
                              int((n - c_risk)[informative].sum())),
                exposure=(float(t_risk[informative].sum()), float(t_ctrl[informative].sum())),
                design=spec.name, look=snapshot.look_index)
    if spec.variant == "month_adjusted":
        ll = _month_adjusted_loglik(snapshot, cat, y, cases)
    elif informative.any():
        ll = _pair_loglik(float(c_risk[informative].sum()), t_risk[informative],
                          t_ctrl[informative], n[informative].astype(float), GRID)
    else:
        ll = np.zeros_like(GRID)
    return LikelihoodProfile.from_loglik(ll, informative=bool(informative.any()), **meta)


def _month_adjusted_loglik(snapshot: LookSnapshot, cat: np.ndarray, y: np.ndarray,
                           cases: np.ndarray, tol: float = 1e-8,
                           max_iter: int = 50) -> np.ndarray:
    """Profile over calendar-month effects, maximized by batched Newton at every grid beta."""
    first = snapshot.config.surveillance_weeks[0]
    weeks = np.arange(first, snapshot.cutoff_week + 1)
    month = month_of_week((weeks - 1) % WEEKS_PER_YEAR + 1)
    cat, y = cat[cases], y[cases]
    n_cells = 24
    cell = month[None, :] * 2 + (cat == _RISK)
    used = cat != _EXCLUDED
    events = np.bincount(cell[used], weights=y[used], minlength=n_cells)
    # subjects with identical exposure layouts share one denominator
    layouts, inverse = np.unique(np.where(used, cell, -1), axis=0, return_inverse=True)
    n_by_layout = np.bincount(inverse.ravel(), weights=y.sum(axis=1, where=used),
                              minlength=len(layouts))
    time = np.stack([np.bincount(row[row >= 0], minlength=n_cells) for row in layouts]).astype(float)
    month_events = events.reshape(12, 2).sum(axis=1)
    month_time = time.reshape(len(layouts), 12, 2).sum(axis=(0, 2))
    # a month with time but no events has its effect at -inf: drop its cells
    live = (month_events > 0) & (month_time > 0)
    keep = np.repeat(live, 2)
    events, time = events[keep], time[:, keep]
    live_months = np.flatnonzero(live)
    if len(live_months) == 0:
        return np.zeros_like(GRID)
    k = len(live_months)
    risk_col = np.tile([0.0, 1.0], k)
    month_col = np.repeat(np.arange(k), 2)
    design = np.zeros((2 * k, k))
    design[np.arange(2 * k), month_col] = 1.0
    design = design[:, 1:]  # first live month is the reference
    theta = np.zeros((len(GRID), k - 1))
    with np.errstate(divide="ignore"):
        log_time = np.log(time)

    def evaluate(th):
        eta = GRID[:, None] * risk_col[None, :] + th @ design.T  # (G, cells)
        logw = log_time[None, :, :] + eta[:, None, :]  # (G, layouts, cells)
        log_d = logsumexp(logw, axis=2)
        value = eta @ events - log_d @ n_by_layout
        return value, logw, log_d

    value, logw, log_d = evaluate(theta)
    for _ in range(max_iter):
        if k == 1:
            break
        p = np.exp(logw - log_d[:, :, None]) @ design  # (G, layouts, k-1)
        grad = events @ design - np.einsum("l,glj->gj", n_by_layout, p)
        hess = -(np.einsum("l,glj->gj", n_by_layout, p)[:, :, None] * np.eye(k - 1)
                 - np.einsum("l,gli,glj->gij", n_by_layout, p, p))
        step = np.linalg.solve(hess, -grad[:, :, None])[:, :, 0]
        step = np.clip(step, -5.0, 5.0)
        theta = theta + step
        value, logw, log_d = evaluate(theta)
        if np.max(np.abs(step)) < tol:
            break
    return value


def with_look(profile_: LikelihoodProfile, look: int) -> LikelihoodProfile:
    return replace(profile_, look=look)
