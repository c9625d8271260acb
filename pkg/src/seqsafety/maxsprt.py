"""Maximized sequential probability ratio test (Poisson model).

The statistic at each look is the log of the maximized likelihood ratio of
``beta > 0`` against ``beta <= 0``. It is not floored at zero: a negative
value simply never crosses a positive critical value. Critical values are
calibrated by Monte Carlo for a pre-specified schedule of expected counts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .designs import LikelihoodProfile, _parabolic_peak
from .rng import RandomStream


def _half_line_sup(ll: np.ndarray, idx: np.ndarray) -> float:
    """Sup of a gridded function over a contiguous index range, parabola-refined."""
    sub = ll[idx]
    j = int(np.argmax(sub))
    if 0 < j < len(sub) - 1:
        return max(float(sub[j]), _parabolic_peak(sub, j)[1])
    return float(sub[j])


def llr_statistic(profile: LikelihoodProfile) -> float:
    """log[ sup_{beta > 0} L / sup_{beta <= 0} L ] on the profile grid.

    beta = 0 belongs to the null; the sup over the open half-line includes
    its limit at 0, so both sides are at least L(0).
    """
    g, ll = profile.grid, profile.loglik
    i0 = int(np.searchsorted(g, 0.0, side="right"))  # first beta > 0
    at_zero = float(np.interp(0.0, g, ll))
    sup_null = max(at_zero, _half_line_sup(ll, np.arange(0, i0))) if i0 > 0 else at_zero
    sup_alt = max(at_zero, _half_line_sup(ll, np.arange(i0, len(g)))) if i0 < len(g) else at_zero
    return sup_alt - sup_null


def poisson_llr(count, expected) -> np.ndarray:
    """Closed-form statistic for the Poisson model, vectorized.

    With ``g = c log(c / mu) - (c - mu)`` the statistic is ``g`` when the
    count exceeds its expectation and ``-g`` otherwise.
    """
    c = np.asarray(count, dtype=float)
    mu = np.asarray(expected, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        clogc = np.where(c > 0, c * np.log(np.where(c > 0, c, 1.0) / mu), 0.0)
    g = clogc - (c - mu)
    return np.where(c > mu, g, -g)


@dataclass(frozen=True)
class SurveillanceSchedule:
    """Planned looks and the expected null event count added at each look.

    ``expected_increment`` may be a scalar (equal group sizes) or one value
    per look. Zero increments are allowed for individual looks (no new
    person-time), but the total must be positive.
    """

    planned_looks: int
    expected_increment: float | tuple[float, ...]
    alpha: float = 0.05

    def __post_init__(self):
        if self.planned_looks < 1:
            raise ValueError("planned_looks must be >= 1")
        if not 0.0 < self.alpha <= 0.5:
            raise ValueError("alpha must lie in (0, 0.5]")
        inc = np.broadcast_to(np.asarray(self.expected_increment, dtype=float),
                              (self.planned_looks,))
        if isinstance(self.expected_increment, (list, np.ndarray)):
            object.__setattr__(self, "expected_increment", tuple(float(v) for v in inc))
        if np.any(inc < 0) or not np.all(np.isfinite(inc)):
            raise ValueError("expected increments must be finite and non-negative")

    @property
    def increments(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.expected_increment, dtype=float),
                               (self.planned_looks,)).copy()

    def key(self) -> str:
        payload = json.dumps({"looks": self.planned_looks,
                              "inc": [round(v, 12) for v in self.increments.tolist()],
                              "alpha": self.alpha}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class CriticalValue:
    cv: float
    schedule: SurveillanceSchedule
    mc_replicates: int
    empirical_alpha_at_cv: float
    seed: tuple = ()
    model: str = "poisson"


def simulate_null_max(schedule: SurveillanceSchedule, mc_replicates: int,
                      rng: np.random.Generator, chunk: int = 20000) -> np.ndarray:
    """Running maximum of the statistic over all looks for null replicates."""
    inc = schedule.increments
    mu = np.cumsum(inc)
    out = np.empty(mc_replicates)
    for start in range(0, mc_replicates, chunk):
        n = min(chunk, mc_replicates - start)
        counts = np.cumsum(rng.poisson(inc, size=(n, len(inc))), axis=1)
        w = poisson_llr(counts, mu[None, :])
        w[:, mu == 0] = -np.inf
        out[start:start + n] = w.max(axis=1)
    return out


def compute_cv(schedule: SurveillanceSchedule, model: str = "poisson",
               mc_replicates: int = 100_000, stream: RandomStream | None = None) -> CriticalValue:
    """Smallest cv whose simulated null exceedance fraction is at most alpha.

    The exceedance fraction ``mean(max_t W_t > cv)`` is a step function of
    cv that only jumps at simulated maxima, so the search runs over the
    sorted maxima and returns an attained value (ties go to the smaller cv).
    """
    if model != "poisson":
        raise ValueError("only the Poisson model is implemented")
    if mc_replicates < 10_000:
        raise ValueError("mc_replicates must be >= 10^4")
    if schedule.increments.sum() <= 0:
        raise ValueError("alpha is unreachable: the schedule expects no events")
    stream = stream or RandomStream(0, ("cv",))
    maxima = np.sort(simulate_null_max(schedule, mc_replicates, stream.generator()))
    allowed = int(np.floor(schedule.alpha * mc_replicates + 1e-9))
    lo, hi = 0, mc_replicates - 1  # bisect for the first sorted index satisfying the bound
    while lo < hi:
        mid = (lo + hi) // 2
        exceed = mc_replicates - np.searchsorted(maxima, maxima[mid], side="right")
        if exceed <= allowed:
            hi = mid
        else:
            lo = mid + 1
    cv = float(maxima[lo])
    if not cv > 0:
        raise ValueError("calibrated cv is not positive; schedule is degenerate")
    exceed = mc_replicates - np.searchsorted(maxima, cv, side="right")
    return CriticalValue(cv, schedule, mc_replicates, exceed / mc_replicates,
                         (stream.master_seed,) + stream.path)


def empirical_type1(cv: float, schedule: SurveillanceSchedule, mc_replicates: int,
                    stream: RandomStream) -> float:
    """Re-simulated null rejection rate of a given critical value."""
    maxima = simulate_null_max(schedule, mc_replicates, stream.generator())
    return float(np.mean(maxima > cv))


@dataclass(frozen=True)
class LookRecord:
    look: int
    statistic: float
    threshold: float
    signaled: bool


@dataclass(frozen=True)
class SequentialDecision:
    """Per-look statistics up to (and including) the stopping look."""

    method: str
    records: tuple[LookRecord, ...] = field(default_factory=tuple)
    stopping_time: int | None = None

    @classmethod
    def first_crossing(cls, method: str, looks: Sequence[int], statistics: Sequence[float],
                       threshold: float, stop: bool = True) -> "SequentialDecision":
        records, stopping = [], None
        for look, s in zip(looks, statistics):
            hit = bool(s > threshold)
            records.append(LookRecord(int(look), float(s), float(threshold), hit))
            if hit and stopping is None:
                stopping = int(look)
                if stop:
                    break
        return cls(method, tuple(records), stopping)


def run_maxsprt(profiles_by_look: Sequence[LikelihoodProfile], cv: CriticalValue | float,
                stop: bool = True) -> SequentialDecision:
    """Signal at the first look whose statistic exceeds the critical value."""
    threshold = cv.cv if isinstance(cv, CriticalValue) else float(cv)
    looks = [p.look if p.look is not None else t for t, p in enumerate(profiles_by_look, 1)]
    stats_ = [llr_statistic(p) for p in profiles_by_look]
    return SequentialDecision.first_crossing("maxsprt", looks, stats_, threshold, stop)


# ---------------------------------------------------------------------------
# on-disk cache


def cv_cache_key(schedule: SurveillanceSchedule, model: str, mc_replicates: int,
                 seed: tuple) -> str:
    payload = json.dumps([schedule.key(), model, schedule.alpha, mc_replicates, list(seed)])
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def cached_cv(schedule: SurveillanceSchedule, cache_dir: str | Path, model: str = "poisson",
              mc_replicates: int = 100_000, stream: RandomStream | None = None) -> CriticalValue:
    """:func:`compute_cv` backed by a JSON file per (schedule, model, alpha, reps, seed)."""
    stream = stream or RandomStream(0, ("cv",))
    seed = (stream.master_seed,) + stream.path
    path = Path(cache_dir) / f"cv_{cv_cache_key(schedule, model, mc_replicates, seed)}.json"
    if path.exists():
        d = json.loads(path.read_text())
        return CriticalValue(d["cv"], schedule, d["mc_replicates"], d["empirical_alpha_at_cv"],
                             tuple(d["seed"]), d["model"])
    result = compute_cv(schedule, model, mc_replicates, stream)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    record = {"cv": result.cv, "mc_replicates": result.mc_replicates,
              "empirical_alpha_at_cv": result.empirical_alpha_at_cv, "seed": list(result.seed),
              "model": model, "schedule": asdict(schedule)}
    tmp.write_text(json.dumps(record, indent=1))
    tmp.replace(path)
    return result
