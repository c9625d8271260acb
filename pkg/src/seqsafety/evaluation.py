"""Positive-control synthesis, testing/estimation metrics and threshold calibration.

Sequential statistics are stored as full per-look trajectories (no early
stopping), so any threshold can be re-applied offline. A control counts as
signaled at look t if its statistic crossed the threshold at some look <= t.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .designs import LikelihoodProfile

STANDARD_RRS = (1.5, 2.0, 4.0)
LOW_EVIDENCE_LOOKS = 4
NOT_REACHED = None  # ttd sentinel; written as "NA" in CSV


# ---------------------------------------------------------------------------
# positive controls


def synthesize_positive_profile(nc_profile: LikelihoodProfile, rr: float) -> LikelihoodProfile:
    """Translate a negative-control profile right by log(rr), snapped to the grid.

    ``shift`` on the result holds the exact grid translation, which is the
    true log RR to score against. Points that enter from the left edge are
    linearly extrapolated from the first two grid values.
    """
    if rr < 1:
        raise ValueError("rr must be >= 1")
    grid = nc_profile.grid
    step = grid[1] - grid[0]
    k = int(round(math.log(rr) / step))
    if k == 0:
        return replace(nc_profile, synthetic=rr != 1.0 or nc_profile.synthetic)
    ll = np.asarray(nc_profile.loglik)
    shifted = np.empty_like(ll)
    shifted[k:] = ll[:-k]
    slope = ll[1] - ll[0]
    shifted[:k] = ll[0] + slope * np.arange(-k, 0)
    return LikelihoodProfile.from_loglik(
        shifted, informative=nc_profile.estimable or not nc_profile.boundary, grid=grid,
        event_counts=nc_profile.event_counts, exposure=nc_profile.exposure,
        design=nc_profile.design, look=nc_profile.look, synthetic=True,
        shift=float(k * step))


@dataclass(frozen=True)
class ControlSuite:
    """Negative controls with their positive children and the injected bias spec."""

    n_negative: int = 93
    positive_rrs: tuple[float, ...] = STANDARD_RRS
    bias_mean: float = 0.25
    bias_sd: float = 0.1

    def __post_init__(self):
        if self.n_negative < 2:
            raise ValueError("need at least 2 negative controls")
        if any(r <= 1 for r in self.positive_rrs):
            raise ValueError("positive-control RRs must exceed 1")

    @property
    def rrs(self) -> tuple[float, ...]:
        """True RR of every control: negatives first, then positives grouped by parent."""
        return (1.0,) * self.n_negative + tuple(
            r for _ in range(self.n_negative) for r in self.positive_rrs)

    @property
    def parents(self) -> np.ndarray:
        neg = np.arange(self.n_negative)
        return np.concatenate([neg, np.repeat(neg, len(self.positive_rrs))])

    @property
    def n_controls(self) -> int:
        return self.n_negative * (1 + len(self.positive_rrs))

    def draw_biases(self, rng: np.random.Generator) -> np.ndarray:
        """One additive log-scale bias per negative control (inherited by its children)."""
        return rng.normal(self.bias_mean, self.bias_sd, self.n_negative)

    def expand(self, nc_profiles: Sequence[LikelihoodProfile]) -> list[LikelihoodProfile]:
        """Negative-control profiles followed by their synthesized positive children."""
        out = list(nc_profiles)
        for p in nc_profiles:
            out += [synthesize_positive_profile(p, r) for r in self.positive_rrs]
        return out


# ---------------------------------------------------------------------------
# sequential metrics


def first_crossing(stats: np.ndarray, threshold) -> np.ndarray:
    """0-based look of the first ``stat > threshold`` along the last axis, or -1.

    NaN statistics (skipped looks) never cross.
    """
    stats = np.asarray(stats, dtype=float)
    thr = np.asarray(threshold, dtype=float)
    if thr.ndim:
        thr = thr[..., None]
    with np.errstate(invalid="ignore"):
        hit = stats > thr
    first = np.argmax(hit, axis=-1)
    return np.where(hit.any(axis=-1), first, -1)


def cumulative_signal_rate(first: np.ndarray, n_looks: int) -> np.ndarray:
    """Fraction signaled by each look; non-decreasing by construction."""
    first = np.asarray(first).ravel()
    if first.size == 0:
        return np.full(n_looks, np.nan)
    looks = np.arange(n_looks)
    return ((first[None, :] >= 0) & (first[None, :] <= looks[:, None])).mean(axis=1)


def time_to_detection(rate: np.ndarray, fraction: float):
    """1-based first look where the cumulative signal rate reaches ``fraction``."""
    hit = np.flatnonzero(np.asarray(rate) >= fraction)
    return int(hit[0]) + 1 if len(hit) else NOT_REACHED


METRIC_FIELDS = ("type1", "type2", "sensitivity", "specificity", "ttd25", "ttd50", "mse",
                 "coverage95", "non_estimable_rate", "n_controls", "low_evidence")
KEY_FIELDS = ("method", "design", "prior", "delta1", "look", "true_rr")


@dataclass
class MetricTable:
    """Rows keyed by (method, design, prior, delta1, look, true_rr).

    Testing metrics for true_rr = 1 are Type 1 / specificity; for the
    positive strata they are Type 2 / sensitivity. ttd fields are 1-based
    looks or None when never reached.
    """

    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        missing = set(KEY_FIELDS) - set(row)
        if missing:
            raise ValueError(f"missing key fields {sorted(missing)}")
        for name in METRIC_FIELDS:
            row.setdefault(name, None)
        self.rows.append(row)

    def extend(self, other: "MetricTable") -> None:
        self.rows.extend(other.rows)

    def select(self, **criteria) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in criteria.items())]

    def value(self, metric: str, **criteria):
        rows = self.select(**criteria)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {criteria}")
        return rows[0][metric]

    def series(self, metric: str, **criteria) -> np.ndarray:
        """Metric ordered by look for a fully specified key minus the look."""
        rows = sorted(self.select(**criteria), key=lambda r: r["look"])
        return np.array([np.nan if r[metric] is None else r[metric] for r in rows], dtype=float)

    def to_csv(self, path: str | Path, header: str | None = None) -> None:
        from .io import write_csv

        cols = list(KEY_FIELDS) + list(METRIC_FIELDS)
        write_csv(path, cols, ([r.get(c) for c in cols] for r in self.rows), header)

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricTable":
        from .io import read_csv

        table = cls()
        for r in read_csv(path):
            for k, v in list(r.items()):
                if k in ("method", "design", "prior"):
                    continue
                if v in ("", "NA"):
                    r[k] = None
                elif k in ("look", "ttd25", "ttd50", "n_controls"):
                    r[k] = int(float(v))
                elif k == "low_evidence":
                    r[k] = v == "True"
                else:
                    r[k] = float(v)
            table.rows.append(r)
        return table


def testing_rows(table: MetricTable, first: np.ndarray, true_rr: np.ndarray, n_looks: int,
                 **key) -> None:
    """Append cumulative Type 1 / power rows for each true-RR stratum."""
    for rr in np.unique(true_rr):
        sel = true_rr == rr
        rate = cumulative_signal_rate(first[..., sel], n_looks)
        ttd25 = time_to_detection(rate, 0.25) if rr > 1 else NOT_REACHED
        ttd50 = time_to_detection(rate, 0.50) if rr > 1 else NOT_REACHED
        for t in range(n_looks):
            r = float(rate[t])
            if rr == 1:
                extra = dict(type1=r, specificity=1 - r)
            else:
                extra = dict(type2=1 - r, sensitivity=r, ttd25=ttd25, ttd50=ttd50)
            table.add(look=t + 1, true_rr=float(rr), n_controls=int(sel.sum()),
                      low_evidence=t + 1 <= LOW_EVIDENCE_LOOKS, **extra, **key)


def estimation_summary(estimate: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                       truth: np.ndarray, estimable: np.ndarray) -> tuple[float, float, float]:
    """(mse, coverage95, non-estimable rate) over one set of controls at one look."""
    estimable = np.asarray(estimable, dtype=bool)
    n = estimable.size
    if n == 0:
        return float("nan"), float("nan"), float("nan")
    ok = estimable & np.isfinite(estimate)
    if not ok.any():
        return float("nan"), float("nan"), 1.0 - ok.mean()
    err = estimate[ok] - truth[ok]
    cover = (lo[ok] <= truth[ok]) & (truth[ok] <= hi[ok])
    return float(np.mean(err**2)), float(np.mean(cover)), float(1.0 - estimable.mean())


# ---------------------------------------------------------------------------
# threshold calibration


@dataclass(frozen=True)
class CalibrationResult:
    delta1: float
    achieved_type1: float
    target_type1: float
    flagged: bool = False


DELTA_LATTICE = np.round(np.arange(501, 1000) / 1000.0, 3)


def calibrate_threshold(nc_trajectories: np.ndarray, target_type1: float,
                        lattice: np.ndarray = DELTA_LATTICE) -> CalibrationResult:
    """Smallest lattice threshold whose end-of-analysis Type 1 is at most the target.

    ``nc_trajectories`` holds posterior probabilities of H1 with looks on the
    last axis and one row per negative control (any leading shape). The
    implied Type 1 falls as the threshold rises, so the smallest admissible
    threshold is the one whose rate comes closest to the target from below.
    If no lattice value meets the target the largest is returned, flagged.
    """
    traj = np.asarray(nc_trajectories, dtype=float)
    with np.errstate(invalid="ignore"):
        peak = np.nanmax(np.where(np.isnan(traj), -np.inf, traj), axis=-1).ravel()
    peak = np.sort(peak)
    # type1(d) = fraction with peak > d
    rates = 1.0 - np.searchsorted(peak, lattice, side="right") / peak.size
    ok = np.flatnonzero(rates <= target_type1 + 1e-12)
    if len(ok) == 0:
        return CalibrationResult(float(lattice[-1]), float(rates[-1]), target_type1, True)
    i = ok[0]
    return CalibrationResult(float(lattice[i]), float(rates[i]), target_type1, False)


# ---------------------------------------------------------------------------
# append-only results store


class DuplicateCell(KeyError):
    pass


class ResultStore:
    """Append-only CSV of result rows keyed by a cell id; duplicate ids are rejected.

    Appends take an exclusive file lock, so concurrent writers are safe.
    """

    def __init__(self, path: str | Path, columns: Sequence[str], header: str | None = None):
        self.path = Path(path)
        self.columns = ["cell_id", *columns]
        self.header = header
        self._ids: set[str] | None = None

    def _load_ids(self) -> set[str]:
        ids = set()
        if self.path.exists():
            from .io import read_csv

            ids = {r["cell_id"] for r in read_csv(self.path)}
        return ids

    def __contains__(self, cell_id: str) -> bool:
        if self._ids is None:
            self._ids = self._load_ids()
        return cell_id in self._ids

    def append(self, cell_id: str, rows: Iterable[Mapping]) -> None:
        import fcntl

        from .io import format_value

        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a+", encoding="utf-8", newline="") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                self._ids = self._load_ids()
                if cell_id in self._ids:
                    raise DuplicateCell(cell_id)
                fh.seek(0, os.SEEK_END)
                if fh.tell() == 0:
                    if self.header:
                        fh.write(f"# {self.header}\n")
                    fh.write(",".join(self.columns) + "\n")
                w = csv.writer(fh, lineterminator="\n")
                for r in rows:
                    w.writerow([cell_id] + [format_value(r.get(c)) for c in self.columns[1:]])
                fh.flush()
                self._ids.add(cell_id)
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def rows(self) -> list[dict]:
        from .io import read_csv

        return read_csv(self.path) if self.path.exists() else []
