"""File-based pipeline behind the command line: simulate, cv, analyze, calibrate, report.

A run directory produced by ``simulate`` holds ``cohort.csv``, one sparse
``events_<outcome>.csv`` per outcome, ``outcomes.csv`` and ``manifest.json``.
``analyze`` turns it into one CSV per (method, design, prior, threshold)
cell, ``calibrate`` matches bias-corrected thresholds to MaxSPRT's Type 1,
and ``report`` aggregates cells into a metric table plus SVG charts.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bayes import PriorSpec, posterior
from .bias import BiasModelSpec, InsufficientEvidence, McmcSpec, debias, fit_bias_model
from .designs import DesignSpec, profile
from .evaluation import (ControlSuite, MetricTable, calibrate_threshold, estimation_summary,
                         first_crossing, synthesize_positive_profile, testing_rows)
from .io import (BIAS_SAMPLE_COLUMNS, bias_sample_rows, file_sha256, make_manifest, now_iso,
                 read_comments, read_csv, run_hash, write_csv, write_manifest,
                 write_profile_csv)
from .maxsprt import SurveillanceSchedule, cached_cv, llr_statistic
from .rng import RandomStream
from .scenarios import expected_null_count
from .simulation import (ConfigError, Population, ScenarioConfig, accrue, draw_cohort,
                         month_cutoffs, seasonal_curve, seasonal_uptake, simulate_events)

log = logging.getLogger(__name__)

OUTCOME_OF_INTEREST = "outcome"


# ---------------------------------------------------------------------------
# config resolution

DEFAULTS = {
    "run": {"name": "run", "master_seed": 0, "n_seeds": 1},
    "scenario": {"n_subjects": 2000, "mean_log_rate": math.log(0.002), "seasonal_amplitude": 0.0,
                 "seasonal_peak_week": 1.0, "true_log_rr": 0.0, "covariate_effect": 0.0,
                 "covariate_prevalence": 0.5, "historical_rate_multiplier": 0.5,
                 "risk_window_weeks": 6, "n_weeks_total": 104, "coverage": 0.6,
                 "uptake_amplitude": 0.0, "uptake_peak_week": 1.0, "n_looks": 12},
    "controls": {"n_negative": 0, "positive_rrs": [1.5, 2.0, 4.0], "bias_mean": 0.0,
                 "bias_sd": 0.0, "rate_low": 0.001, "rate_high": 0.01},
    "designs": {"names": ["hc_unadjusted_tar42", "sccs_excl_pre30_tar42"]},
    "maxsprt": {"alpha": 0.05, "mc_replicates": 10_000},
    "bayes": {"prior_variances": [4.0], "thresholds": [0.8, 0.9, 0.95]},
    "bias": {"family": "t", "t_dof": 4.0, "mu_b": 0.0, "sigma2_b": 2.0, "sigma2_tau": 0.5},
    "mcmc": {"total_iterations": 3000, "burn_in": 500, "thin": 5, "chains": 4},
}


def resolve_config(config: dict, seed: int | None = None) -> dict:
    """Defaults overlaid with the user config (and a --seed override)."""
    out = {s: dict(body) for s, body in DEFAULTS.items()}
    for section, body in config.items():
        out[section].update(body)
    if seed is not None:
        out["run"]["master_seed"] = int(seed)
    sc = out["scenario"]
    if sc["n_weeks_total"] != 104:
        raise ConfigError("[scenario].n_weeks_total must be 104 (one historical and one "
                          "surveillance year)")
    if not 1 <= sc["n_looks"] <= 12:
        raise ConfigError("[scenario].n_looks must lie in 1..12")
    for name in out["designs"]["names"]:
        try:
            DesignSpec.from_name(name)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"[designs].names: bad design {name!r}") from exc
    try:
        [PriorSpec(v) for v in out["bayes"]["prior_variances"]]
        BiasModelSpec(**out["bias"])
        McmcSpec(**out["mcmc"])
        ControlSuite(max(out["controls"]["n_negative"], 2), tuple(out["controls"]["positive_rrs"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for t in out["bayes"]["thresholds"]:
        if not 0.5 < t < 1:
            raise ConfigError("[bayes].thresholds must lie in (0.5, 1)")
    if out["maxsprt"]["mc_replicates"] < 10_000:
        raise ConfigError("[maxsprt].mc_replicates must be >= 10000")
    if not 0 < out["maxsprt"]["alpha"] < 1:
        raise ConfigError("[maxsprt].alpha must lie in (0, 1)")
    return out


def scenario_config(cfg: dict, log_rate_shift: float = 0.0,
                    true_log_rr: float | None = None) -> ScenarioConfig:
    sc = cfg["scenario"]
    if "baseline_log_rate" in sc:
        base = np.asarray(sc["baseline_log_rate"], dtype=float) + log_rate_shift
    else:
        base = seasonal_curve(sc["mean_log_rate"] + log_rate_shift, sc["seasonal_amplitude"],
                              sc["seasonal_peak_week"])
    if "uptake_curve" in sc:
        uptake = np.asarray(sc["uptake_curve"], dtype=float)
    else:
        uptake = seasonal_uptake(sc["coverage"], sc["uptake_amplitude"], sc["uptake_peak_week"])
    return ScenarioConfig(
        n_subjects=sc["n_subjects"], baseline_log_rate=base, uptake_curve=uptake,
        true_log_rr=sc["true_log_rr"] if true_log_rr is None else true_log_rr,
        covariate_effect=sc["covariate_effect"], covariate_prevalence=sc["covariate_prevalence"],
        historical_rate_multiplier=sc["historical_rate_multiplier"],
        risk_window_weeks=sc["risk_window_weeks"], master_seed=cfg["run"]["master_seed"])


def outcome_table(cfg: dict) -> list[dict]:
    """Outcome of interest plus negative controls with their drawn rates and biases."""
    root = RandomStream(cfg["run"]["master_seed"], ("simulate",))
    c = cfg["controls"]
    rows = [{"outcome": OUTCOME_OF_INTEREST, "kind": "interest", "log_rate_shift": 0.0,
             "true_log_rr": cfg["scenario"]["true_log_rr"], "injected_bias": 0.0}]
    n = c["n_negative"]
    if n:
        rng = root.child("controls").generator()
        log_rates = rng.uniform(math.log(c["rate_low"]), math.log(c["rate_high"]), n)
        biases = rng.normal(c["bias_mean"], c["bias_sd"], n) if c["bias_sd"] > 0 else \
            np.full(n, c["bias_mean"])
        for j in range(n):
            rows.append({"outcome": f"nc{j + 1:03d}", "kind": "negative",
                         "log_rate_shift": float(log_rates[j] - cfg["scenario"]["mean_log_rate"]),
                         "true_log_rr": 0.0, "injected_bias": float(biases[j])})
    return rows


# ---------------------------------------------------------------------------
# simulate


def _csv_header(run_id: str) -> str:
    return f"manifest: {run_id}"


def simulate(cfg: dict, out_dir: Path) -> dict:
    started = now_iso()
    out_dir.mkdir(parents=True, exist_ok=True)
    run_id = run_hash("simulate", cfg, cfg["run"]["master_seed"], __version__)
    header = _csv_header(run_id)
    root = RandomStream(cfg["run"]["master_seed"], ("simulate",))
    base = scenario_config(cfg)
    cohort = draw_cohort(base, root)
    outputs = {}
    write_csv(out_dir / "cohort.csv", ["subject_id", "covariate", "vaccination_week"],
              ((i, int(x), int(v)) for i, (x, v) in
               enumerate(zip(cohort.covariate, cohort.vaccination_week))), header)
    outcomes = outcome_table(cfg)
    write_csv(out_dir / "outcomes.csv", list(outcomes[0]),
              ([r[k] for k in outcomes[0]] for r in outcomes), header)
    seeds = {"cohort": list(root.child("cohort").path)}
    for r in outcomes:
        sc = scenario_config(cfg, r["log_rate_shift"], r["true_log_rr"] + r["injected_bias"])
        stream = root.child("outcome", r["outcome"])
        counts = simulate_events(cohort, sc, stream)
        subj, wk = np.nonzero(counts)
        write_csv(out_dir / f"events_{r['outcome']}.csv",
                  ["subject_id", "covariate", "vaccination_week", "week", "count"],
                  ((int(i), int(cohort.covariate[i]), int(cohort.vaccination_week[i]),
                    int(w) + 1, int(counts[i, w])) for i, w in zip(subj, wk)), header)
        seeds[r["outcome"]] = list(stream.child("events").path)
    for p in sorted(out_dir.glob("*.csv")):
        outputs[p.name] = file_sha256(p)
    manifest = make_manifest("simulate", cfg, cfg["run"]["master_seed"], seeds, outputs,
                             started, __version__)
    manifest["run_id"] = run_id
    write_manifest(out_dir / "manifest.json", manifest)
    return manifest


def load_population(data_dir: Path, cfg: dict, outcome: dict) -> Population:
    cohort_rows = read_csv(data_dir / "cohort.csv")
    n = len(cohort_rows)
    covariate = np.array([int(r["covariate"]) for r in cohort_rows], dtype=np.int8)
    vacc = np.array([int(r["vaccination_week"]) for r in cohort_rows], dtype=np.int32)
    sc = scenario_config(cfg, outcome["log_rate_shift"],
                         outcome["true_log_rr"] + outcome["injected_bias"])
    counts = np.zeros((n, sc.n_weeks_total), dtype=np.int32)
    for r in read_csv(data_dir / f"events_{outcome['outcome']}.csv"):
        counts[int(r["subject_id"]), int(r["week"]) - 1] = int(r["count"])
    return Population(sc, covariate, vacc, counts)


def read_outcomes(data_dir: Path) -> list[dict]:
    rows = read_csv(data_dir / "outcomes.csv")
    for r in rows:
        for k in ("log_rate_shift", "true_log_rr", "injected_bias"):
            r[k] = float(r[k])
    return rows


# ---------------------------------------------------------------------------
# cv


def compute_cv_table(cfg: dict, out_dir: Path, schedules: list[SurveillanceSchedule]) -> list:
    rows = []
    m = cfg["maxsprt"]
    for sched in schedules:
        cv = cached_cv(sched, out_dir / "cv_cache", "poisson", m["mc_replicates"],
                       RandomStream(cfg["run"]["master_seed"], ("cv", sched.key())))
        rows.append((sched.planned_looks, sched.alpha, m["mc_replicates"], sched.key(),
                     cv.cv, cv.empirical_alpha_at_cv))
    return rows


# ---------------------------------------------------------------------------
# analyze

CELL_COLUMNS = ("outcome", "kind", "true_rr", "true_log_rr", "look", "statistic", "threshold", "signaled",
                "estimate", "lo95", "hi95", "estimable", "skipped")


@dataclass(frozen=True)
class Cell:
    method: str
    design: str
    prior: float | None
    delta1: float | None

    @property
    def name(self) -> str:
        prior = "NA" if self.prior is None else f"{self.prior:g}"
        delta = "NA" if self.delta1 is None else f"{self.delta1:g}"
        return f"{self.method}__{self.design}__prior_{prior}__delta_{delta}"

    @classmethod
    def parse(cls, name: str) -> "Cell":
        method, design, prior, delta = name.split("__")
        p = prior.split("_", 1)[1]
        d = delta.split("_", 1)[1]
        return cls(method, design, None if p == "NA" else float(p),
                   None if d == "NA" else float(d))


def method_grid(cfg: dict, with_controls: bool) -> list[Cell]:
    cells = []
    for design in cfg["designs"]["names"]:
        cells.append(Cell("maxsprt", design, None, None))
        for var in cfg["bayes"]["prior_variances"]:
            for t in cfg["bayes"]["thresholds"]:
                cells.append(Cell("bayes", design, var, t))
                if with_controls:
                    cells.append(Cell("bbc", design, var, t))
    return cells


def _design_task(task):
    data_dir, cfg, design, cells, out_dir, run_id = task
    return analyze_design(Path(data_dir), cfg, design, cells, Path(out_dir), run_id)


def analyze_design(data_dir: Path, cfg: dict, design: str, cells: list[Cell], out_dir: Path,
                   run_id: str) -> list[str]:
    """Profiles for every outcome and look under one design, then every requested cell."""
    spec = DesignSpec.from_name(design)
    outcomes = read_outcomes(data_dir)
    n_looks = cfg["scenario"]["n_looks"]
    cutoffs = month_cutoffs(n_looks)
    rrs = tuple(cfg["controls"]["positive_rrs"])
    controls = []  # (name, kind, true_rr, truth, profiles by look)
    for o in outcomes:
        pop = load_population(data_dir, cfg, o)
        profs = [profile(s, spec) for s in accrue(pop, cutoffs)]
        truth = o["true_log_rr"]
        controls.append((o["outcome"], o["kind"], math.exp(truth), truth, profs))
        if o["kind"] == "negative":
            for rr in rrs:
                pcs = [synthesize_positive_profile(p, rr) for p in profs]
                controls.append((f"{o['outcome']}_rr{rr:g}", "positive", rr, pcs[0].shift, pcs))
        if o["kind"] == "interest":
            for p in profs:
                write_profile_csv(out_dir / "profiles" / f"{design}__look{p.look:02d}.csv", p,
                                  _csv_header(run_id))
    negatives = [c for c in controls if c[1] == "negative"]
    m = cfg["maxsprt"]
    cv_of = {}
    for name, kind, _, _, profs in controls:
        parent = name.split("_rr")[0]
        if parent in cv_of:
            cv_of[name] = cv_of[parent]
            continue
        mu = np.array([expected_null_count(p) for p in profs])
        inc = np.clip(np.diff(mu, prepend=0.0), 0.0, None)
        if inc.sum() <= 0:
            cv_of[name] = float("inf")
            continue
        sched = SurveillanceSchedule(n_looks, tuple(inc), m["alpha"])
        cv_of[name] = cached_cv(sched, out_dir / "cv_cache", "poisson", m["mc_replicates"],
                                RandomStream(cfg["run"]["master_seed"], ("cv", design, parent))).cv
    bias_by_look = {}
    if any(c.method == "bbc" for c in cells):
        bias_rows = []
        for t in range(n_looks):
            ncs = [c[4][t] for c in negatives]
            try:
                bias_by_look[t] = fit_bias_model(
                    ncs, BiasModelSpec(**cfg["bias"]), McmcSpec(**cfg["mcmc"]),
                    control_ids=[c[0] for c in negatives],
                    stream=RandomStream(cfg["run"]["master_seed"], ("bias", design, t)))
                bias_rows += bias_sample_rows(bias_by_look[t], t + 1)
                if bias_by_look[t].flagged:
                    log.warning("%s look %d: bias model R-hat above limit", design, t + 1)
            except InsufficientEvidence as exc:
                log.warning("%s look %d skipped: %s", design, t + 1, exc)
                bias_by_look[t] = None
        write_csv(out_dir / "bias" / f"{design}.csv", BIAS_SAMPLE_COLUMNS, bias_rows,
                  _csv_header(run_id))
    written = []
    for cell in cells:
        rows = []
        for name, kind, rr, truth, profs in controls:
            prior = None if cell.prior is None else PriorSpec(cell.prior)
            stats, est, lo, hi, skipped = [], [], [], [], []
            for t, p in enumerate(profs):
                skip = ""
                if cell.method == "maxsprt":
                    s = llr_statistic(p)
                    e = p.mle
                    a, b = p.confidence_interval() if p.estimable else (math.nan, math.nan)
                else:
                    post = posterior(p, prior)
                    if cell.method == "bayes":
                        s, e, (a, b) = post.p_h1, post.median, post.ci95
                    elif bias_by_look.get(t) is None:
                        s, e, a, b, skip = math.nan, math.nan, math.nan, math.nan, "evidence"
                    else:
                        rng = RandomStream(cfg["run"]["master_seed"],
                                           ("debias", design, cell.prior, name, t)).generator()
                        dp = debias(p, prior, bias_by_look[t], biased_posterior=post, rng=rng)
                        s, e, (a, b) = dp.p_h1_hat, dp.median, dp.ci95
                stats.append(s)
                est.append(e)
                lo.append(a)
                hi.append(b)
                skipped.append(skip)
            thr = cv_of[name] if cell.method == "maxsprt" else cell.delta1
            first = int(first_crossing(np.array(stats), thr))
            for t, p in enumerate(profs):
                rows.append((name, kind, rr, truth, t + 1, stats[t], thr, first >= 0 and t >= first,
                             est[t], lo[t], hi[t], p.estimable, skipped[t]))
        path = out_dir / "cells" / f"{cell.name}.csv"
        write_csv(path, CELL_COLUMNS, rows, _csv_header(run_id))
        written.append(str(path))
    return written


def analyze(data_dir: Path, cfg: dict, out_dir: Path, jobs: int = 1, resume: bool = False) -> dict:
    started = now_iso()
    if not (data_dir / "manifest.json").exists():
        raise FileNotFoundError(f"{data_dir} has no simulate manifest")
    data_manifest = json.loads((data_dir / "manifest.json").read_text())
    outcomes = read_outcomes(data_dir)
    has_controls = sum(o["kind"] == "negative" for o in outcomes) > 0
    cells = method_grid(cfg, has_controls)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_id = run_hash("analyze", cfg, cfg["run"]["master_seed"],
                      [data_manifest.get("manifest_hash"), __version__])
    if not cells:
        log.warning("empty method grid: nothing to analyze")
    todo = {}
    for cell in cells:
        path = out_dir / "cells" / f"{cell.name}.csv"
        if resume and path.exists() and _csv_header(run_id) in read_comments(path):
            log.info("resume: skipping completed cell %s", cell.name)
            continue
        todo.setdefault(cell.design, []).append(cell)
    tasks = [(str(data_dir), cfg, d, cs, str(out_dir), run_id) for d, cs in todo.items()]
    failures = []
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(min(jobs, len(tasks))) as ex:
            futures = [ex.submit(_design_task, t) for t in tasks]
            for t, f in zip(tasks, futures):
                try:
                    f.result()
                except Exception as exc:  # per-cell failures never abort the sweep
                    failures.append((t[2], repr(exc)))
    else:
        for t in tasks:
            try:
                _design_task(t)
            except Exception as exc:
                failures.append((t[2], repr(exc)))
    for design, err in failures:
        log.error("design %s failed: %s", design, err)
    outputs = {str(p.relative_to(out_dir)): file_sha256(p)
               for p in sorted(out_dir.rglob("*.csv"))}
    manifest = make_manifest("analyze", cfg, cfg["run"]["master_seed"],
                             {"data_manifest": data_manifest.get("manifest_hash")},
                             outputs, started, __version__)
    manifest["run_id"] = run_id
    manifest["failures"] = failures
    write_manifest(out_dir / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# calibrate


def _cell_arrays(path: Path):
    rows = read_csv(path)
    names = sorted({r["outcome"] for r in rows})
    index = {n: i for i, n in enumerate(names)}
    n_looks = max(int(r["look"]) for r in rows) if rows else 0
    stat = np.full((len(names), n_looks), np.nan)
    sig = np.zeros((len(names), n_looks), dtype=bool)
    kind, rr, truth = {}, {}, {}
    for r in rows:
        i, t = index[r["outcome"]], int(r["look"]) - 1
        stat[i, t] = float(r["statistic"]) if r["statistic"] != "NA" else np.nan
        sig[i, t] = r["signaled"] == "True"
        kind[r["outcome"]] = r["kind"]
        rr[r["outcome"]] = float(r["true_rr"])
        truth[r["outcome"]] = float(r["true_log_rr"])
    return names, stat, sig, kind, rr, truth, rows


def results_header(results_dir: Path, command: str) -> str:
    """Manifest header for outputs derived from an analyze/experiment directory."""
    m = results_dir / "manifest.json"
    parent = json.loads(m.read_text()).get("manifest_hash") if m.exists() else None
    return _csv_header(run_hash(command, {}, 0, [parent, __version__]))


def calibrate(results_dir: Path, out_path: Path) -> list[tuple]:
    """Match each BBC cell's threshold to MaxSPRT's final Type 1 on the same design."""
    cells_dir = results_dir / "cells"
    out = []
    for path in sorted(cells_dir.glob("bbc__*.csv")):
        cell = Cell.parse(path.stem)
        ms = cells_dir / Cell("maxsprt", cell.design, None, None).name
        ms = ms.with_suffix(".csv")
        if not ms.exists():
            log.warning("no MaxSPRT cell for %s", cell.design)
            continue
        names, _, sig, kind, _, _, _ = _cell_arrays(ms)
        neg = np.array([kind[n] == "negative" for n in names])
        if not neg.any():
            continue
        target = float(sig[neg, -1].mean())
        names_b, stat, _, kind_b, _, _, _ = _cell_arrays(path)
        neg_b = np.array([kind_b[n] == "negative" for n in names_b])
        res = calibrate_threshold(stat[neg_b], target)
        out.append((cell.design, cell.prior, cell.delta1, target, res.delta1,
                    res.achieved_type1, res.flagged))
    write_csv(out_path, ["design", "prior", "source_delta1", "target_type1", "delta1",
                         "achieved_type1", "flagged"], out, results_header(results_dir, "calibrate"))
    return out


# ---------------------------------------------------------------------------
# report


def metric_table_from_cells(results_dir: Path) -> MetricTable:
    table = MetricTable()
    for path in sorted((results_dir / "cells").glob("*.csv")):
        cell = Cell.parse(path.stem)
        names, stat, sig, kind, rr, truth_of, rows = _cell_arrays(path)
        if not names:
            continue
        n_looks = stat.shape[1]
        first = np.where(sig.any(axis=1), np.argmax(sig, axis=1), -1)
        true_rr = np.array([rr[n] for n in names])
        controls = np.array([kind[n] != "interest" for n in names])
        key = dict(method=cell.method, design=cell.design,
                   prior="NA" if cell.prior is None else PriorSpec(cell.prior).label,
                   delta1=cell.delta1)
        before = len(table.rows)
        testing_rows(table, first[controls], true_rr[controls], n_looks, **key)
        est = np.full(stat.shape, np.nan)
        lo, hi = est.copy(), est.copy()
        estimable = np.zeros(stat.shape, dtype=bool)
        index = {n: i for i, n in enumerate(names)}
        for r in rows:
            i, t = index[r["outcome"]], int(r["look"]) - 1
            for arr, k in ((est, "estimate"), (lo, "lo95"), (hi, "hi95")):
                arr[i, t] = np.nan if r[k] == "NA" else float(r[k])
            estimable[i, t] = r["estimable"] == "True"
        truth = np.array([truth_of[n] for n in names])
        for row in table.rows[before:]:
            t = row["look"] - 1
            sel = controls & (true_rr == row["true_rr"])
            mse, cov, ne = estimation_summary(est[sel, t], lo[sel, t], hi[sel, t], truth[sel],
                                              estimable[sel, t])
            row.update(mse=mse, coverage95=cov, non_estimable_rate=ne)
    return table


def report(results_dir: Path, out_dir: Path) -> dict:
    from . import plots

    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    header = results_header(results_dir, "report")
    if (results_dir / "cells").exists():
        table = metric_table_from_cells(results_dir)
        table.to_csv(out_dir / "metrics.csv", header)
        outputs["metrics.csv"] = str(out_dir / "metrics.csv")
        if table.rows:
            for f in plots.metric_panels(table, out_dir):
                outputs[Path(f).name] = f
        for bias_csv in sorted((results_dir / "bias").glob("*.csv")):
            f = plots.bias_ridgeline_from_csv(bias_csv, out_dir / f"bias_{bias_csv.stem}.svg")
            if f:
                outputs[Path(f).name] = f
    else:
        MetricTable().to_csv(out_dir / "metrics.csv", header)
        outputs["metrics.csv"] = str(out_dir / "metrics.csv")
    for f in plots.experiment_figures(results_dir, out_dir):
        outputs[Path(f).name] = f
    return outputs


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1
