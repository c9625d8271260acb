"""Subject-level event trajectories and cumulative monthly look snapshots.

Weekly outcome counts follow

    Y_ik ~ Poisson(exp(alpha_k + x_i * gamma + 1(i at risk in week k) * beta))

over ``n_weeks_total`` weeks; the first block of weeks is a historical period
(no vaccination, baseline rate scaled by ``historical_rate_multiplier``) and
the second block is the surveillance period during which subjects may be
vaccinated once. Weeks are 1-based throughout the public API.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy import stats

from .rng import RandomStream

WEEKS_PER_YEAR = 52
MAX_LOG_RATE = 10.0  # overflow guard: e^10 events per subject-week


class ConfigError(ValueError):
    """A scenario or analysis configuration is invalid."""


def seasonal_curve(mean_log_rate: float, amplitude: float, peak_week: float = 1.0,
                   n_weeks: int = WEEKS_PER_YEAR) -> np.ndarray:
    """Log-rate table ``mean + amplitude * cos(2 pi (week - peak) / 52)``."""
    weeks = np.arange(1, n_weeks + 1)
    return mean_log_rate + amplitude * np.cos(2 * np.pi * (weeks - peak_week) / WEEKS_PER_YEAR)


def seasonal_uptake(coverage: float, amplitude: float, peak_week: float = 1.0,
                    n_weeks: int = WEEKS_PER_YEAR) -> np.ndarray:
    """Weekly vaccination probabilities with the same shape as ``seasonal_curve``.

    The curve sums to ``coverage``; amplitude 0 gives uniform uptake.
    """
    shape = np.exp(seasonal_curve(0.0, amplitude, peak_week, n_weeks))
    return coverage * shape / shape.sum()


def month_cutoffs(n_months: int = 12, first_week: int = WEEKS_PER_YEAR + 1) -> list[int]:
    """Last week (1-based, absolute) of each surveillance month.

    Month m ends ``round(m * 52 / 12)`` weeks into the year, which gives the
    4/5/4-week alternation of calendar months.
    """
    return [first_week - 1 + round(m * WEEKS_PER_YEAR / 12) for m in range(1, n_months + 1)]


def month_of_week(week_in_year: np.ndarray) -> np.ndarray:
    """0-based calendar month for a 1-based week of the year."""
    ends = np.array([round(m * WEEKS_PER_YEAR / 12) for m in range(1, 13)])
    return np.searchsorted(ends, np.asarray(week_in_year), side="left")


@dataclass(frozen=True)
class ScenarioConfig:
    """Parameters of the simulated population and outcome.

    ``baseline_log_rate`` holds either a 52-entry week-of-year table (repeated
    every year) or one entry per simulated week. ``uptake_curve`` has one
    vaccination probability per surveillance week. Week ranges are inclusive
    ``(first, last)`` pairs.
    """

    n_subjects: int
    baseline_log_rate: np.ndarray
    uptake_curve: np.ndarray
    true_log_rr: float = 0.0
    covariate_effect: float = 0.0
    covariate_prevalence: float = 0.5
    historical_rate_multiplier: float = 0.5
    risk_window_weeks: int = 6
    n_weeks_total: int = 2 * WEEKS_PER_YEAR
    historical_weeks: tuple[int, int] = (1, WEEKS_PER_YEAR)
    surveillance_weeks: tuple[int, int] = (WEEKS_PER_YEAR + 1, 2 * WEEKS_PER_YEAR)
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "baseline_log_rate",
                           np.asarray(self.baseline_log_rate, dtype=float))
        object.__setattr__(self, "uptake_curve", np.asarray(self.uptake_curve, dtype=float))
        object.__setattr__(self, "historical_weeks", tuple(int(w) for w in self.historical_weeks))
        object.__setattr__(self, "surveillance_weeks",
                           tuple(int(w) for w in self.surveillance_weeks))
        self.validate()

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if self.risk_window_weeks < 1:
            raise ConfigError("risk_window_weeks must be >= 1")
        if not 0.0 <= self.covariate_prevalence <= 1.0:
            raise ConfigError("covariate_prevalence must lie in [0, 1]")
        if not 0.0 < self.historical_rate_multiplier <= 1.0:
            raise ConfigError("historical_rate_multiplier must lie in (0, 1]")
        h0, h1 = self.historical_weeks
        s0, s1 = self.surveillance_weeks
        if not (h0 == 1 and h1 + 1 == s0 and s1 == self.n_weeks_total and h0 <= h1 < s1):
            raise ConfigError("historical_weeks and surveillance_weeks must tile "
                              f"1..{self.n_weeks_total} in that order")
        if self.baseline_log_rate.ndim != 1 or len(self.baseline_log_rate) not in (
                WEEKS_PER_YEAR, self.n_weeks_total):
            raise ConfigError(f"baseline_log_rate needs {WEEKS_PER_YEAR} or "
                              f"{self.n_weeks_total} entries")
        if not np.all(np.isfinite(self.baseline_log_rate)):
            raise ConfigError("baseline_log_rate must be finite")
        if len(self.uptake_curve) != self.n_surveillance_weeks:
            raise ConfigError(f"uptake_curve needs {self.n_surveillance_weeks} entries")
        if np.any(self.uptake_curve < 0) or np.any(self.uptake_curve > 1):
            raise ConfigError("uptake_curve entries must be probabilities")
        if self.uptake_curve.sum() > 1.0 + 1e-9:
            raise ConfigError("uptake_curve must sum to <= 1")

    @property
    def n_historical_weeks(self) -> int:
        return self.historical_weeks[1] - self.historical_weeks[0] + 1

    @property
    def n_surveillance_weeks(self) -> int:
        return self.surveillance_weeks[1] - self.surveillance_weeks[0] + 1

    def weekly_log_rate(self) -> np.ndarray:
        """Baseline log-rate for every simulated week, historical scaling applied."""
        if len(self.baseline_log_rate) == self.n_weeks_total:
            alpha = self.baseline_log_rate.copy()
        else:
            woy = np.arange(self.n_weeks_total) % WEEKS_PER_YEAR
            alpha = self.baseline_log_rate[woy]
        alpha[: self.n_historical_weeks] += np.log(self.historical_rate_multiplier)
        return alpha


@dataclass(frozen=True)
class SubjectTrajectory:
    subject_id: int
    covariate: int
    vaccination_week: int | None
    weekly_counts: np.ndarray


@dataclass(frozen=True)
class Cohort:
    """Subject covariates and vaccination weeks (0 = never vaccinated)."""

    covariate: np.ndarray
    vaccination_week: np.ndarray

    def __len__(self) -> int:
        return len(self.covariate)


@dataclass(frozen=True)
class Population:
    """Simulated trajectories stored column-wise.

    ``counts[i, k - 1]`` is the count of subject ``i`` in week ``k``.
    Iterating yields :class:`SubjectTrajectory` records.
    """

    config: ScenarioConfig
    covariate: np.ndarray
    vaccination_week: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        for arr in (self.covariate, self.vaccination_week, self.counts):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.covariate)

    def __getitem__(self, i: int) -> SubjectTrajectory:
        v = int(self.vaccination_week[i])
        return SubjectTrajectory(i, int(self.covariate[i]), v if v > 0 else None,
                                 self.counts[i])

    def __iter__(self) -> Iterator[SubjectTrajectory]:
        return (self[i] for i in range(len(self)))

    @property
    def cohort(self) -> Cohort:
        return Cohort(self.covariate, self.vaccination_week)


def at_risk_mask(vaccination_week: np.ndarray, risk_window_weeks: int,
                 n_weeks: int) -> np.ndarray:
    """Boolean (subjects, weeks) mask of weeks v+1 .. v+R after vaccination week v."""
    v = np.asarray(vaccination_week)[:, None]
    weeks = np.arange(1, n_weeks + 1)[None, :]
    return (v > 0) & (weeks > v) & (weeks <= v + risk_window_weeks)


def draw_cohort(config: ScenarioConfig, stream: RandomStream) -> Cohort:
    """Covariates and vaccination weeks; subject i uses only counters (i, slot)."""
    ids = np.arange(config.n_subjects, dtype=np.uint64)
    key = stream.child("cohort")
    covariate = (key.uniform(ids, 0) < config.covariate_prevalence).astype(np.int8)
    cum = np.cumsum(config.uptake_curve)
    u = key.uniform(ids, 1)
    slot = np.searchsorted(cum, u, side="right")
    vaccinated = slot < len(cum)
    vaccination_week = np.where(vaccinated, config.surveillance_weeks[0] + slot, 0)
    return Cohort(covariate, vaccination_week.astype(np.int32))


def _poisson_from_uniform(u: np.ndarray, lam: np.ndarray) -> np.ndarray:
    # sequential CDF search for small rates, scipy ppf for large ones
    out = np.zeros(u.shape, dtype=np.int32)
    p = np.exp(-lam)
    todo = np.flatnonzero(u > p)
    if todo.size == 0:
        return out
    uu, ll = u.ravel()[todo], lam.ravel()[todo]
    big = ll > 20.0
    if big.any():
        out.ravel()[todo[big]] = stats.poisson.ppf(uu[big], ll[big]).astype(np.int32)
        todo, uu, ll = todo[~big], uu[~big], ll[~big]
    pk = np.exp(-ll)
    cdf = pk.copy()
    k = np.zeros(todo.size, dtype=np.int32)
    active = uu > cdf
    while active.any():
        idx = np.flatnonzero(active)
        k[idx] += 1
        pk[idx] *= ll[idx] / k[idx]
        cdf[idx] += pk[idx]
        active[idx] = uu[idx] > cdf[idx]
    out.ravel()[todo] = k
    return out


def simulate_events(cohort: Cohort, config: ScenarioConfig, stream: RandomStream) -> np.ndarray:
    """Weekly counts (subjects, weeks) for one outcome on a fixed cohort.

    The draw for cell (i, k) is a pure function of (stream key, i, k).
    """
    log_rate = config.weekly_log_rate()[None, :] + cohort.covariate[:, None] * config.covariate_effect
    risk = at_risk_mask(cohort.vaccination_week, config.risk_window_weeks, config.n_weeks_total)
    log_rate = log_rate + risk * config.true_log_rr
    if np.max(log_rate) > MAX_LOG_RATE:
        raise ConfigError(f"weekly rate exceeds e^{MAX_LOG_RATE:g} events per subject-week; "
                          "scenario is misconfigured")
    ids = np.arange(len(cohort), dtype=np.uint64)[:, None]
    weeks = np.arange(1, config.n_weeks_total + 1, dtype=np.uint64)[None, :]
    u = stream.child("events").uniform(ids, weeks)
    return _poisson_from_uniform(u, np.exp(log_rate))


def simulate_population(config: ScenarioConfig, stream: RandomStream | None = None,
                        cohort: Cohort | None = None) -> Population:
    """Simulate every subject's weekly counts.

    Pass ``cohort`` to simulate another outcome on the same subjects.
    """
    if stream is None:
        stream = RandomStream(config.master_seed)
    if cohort is None:
        cohort = draw_cohort(config, stream)
    counts = simulate_events(cohort, config, stream)
    return Population(config, np.array(cohort.covariate), np.array(cohort.vaccination_week), counts)


@dataclass(frozen=True)
class LookSnapshot:
    """All data accrued through ``cutoff_week`` (``X_t`` at look ``t``).

    Vaccinations after the cutoff are not yet observed, so they read as 0.
    The historical block is always fully available.
    """

    look_index: int
    cutoff_week: int
    population: Population = field(repr=False)

    @property
    def config(self) -> ScenarioConfig:
        return self.population.config

    @property
    def covariate(self) -> np.ndarray:
        return self.population.covariate

    @property
    def counts(self) -> np.ndarray:
        """Counts for weeks 1 .. cutoff_week."""
        return self.population.counts[:, : self.cutoff_week]

    @property
    def vaccination_week(self) -> np.ndarray:
        v = self.population.vaccination_week
        return np.where(v <= self.cutoff_week, v, 0)

    @property
    def historical_counts(self) -> np.ndarray:
        return self.population.counts[:, : self.config.n_historical_weeks]

    @property
    def surveillance_counts(self) -> np.ndarray:
        """Observed surveillance weeks, first surveillance week .. cutoff."""
        return self.population.counts[:, self.config.n_historical_weeks: self.cutoff_week]

    def total_events(self) -> int:
        return int(self.counts.sum())


def accrue(population: Population, cutoffs: Sequence[int]) -> list[LookSnapshot]:
    """Cumulative snapshots, one per cutoff week (1-based absolute weeks)."""
    cutoffs = [int(c) for c in cutoffs]
    s0, s1 = population.config.surveillance_weeks
    if any(b <= a for a, b in zip(cutoffs, cutoffs[1:])):
        raise ValueError("cutoffs must be strictly increasing")
    if cutoffs and (cutoffs[0] < s0 or cutoffs[-1] > s1):
        raise ValueError(f"cutoffs must lie within surveillance weeks {s0}..{s1}")
    return [LookSnapshot(t, c, population) for t, c in enumerate(cutoffs, start=1)]
