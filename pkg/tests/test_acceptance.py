"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

The control sweep (criteria 4 and 5) takes roughly half an hour on one core.
Set SEQSAFETY_ACCEPTANCE_CACHE to a directory to reuse its result between runs.
"""

import hashlib
import math
import os
import pickle
import time
from pathlib import Path

import numpy as np
import pytest

from seqsafety.bayes import PriorSpec, posterior
from seqsafety.bias import BiasModelSpec, McmcSpec, fit_bias_model
from seqsafety.designs import GRID, GRID_STEP, LikelihoodProfile, poisson_profile
from seqsafety.evaluation import (calibrate_threshold, cumulative_signal_rate,
                                  synthesize_positive_profile, time_to_detection)
from seqsafety.maxsprt import (SurveillanceSchedule, compute_cv, empirical_type1, llr_statistic,
                               poisson_llr)
from seqsafety.pipeline import default_jobs
from seqsafety.rng import RandomStream
from seqsafety.scenarios import (ControlExperiment, ScheduleExperiment, run_clean_bayes_experiment,
                                 run_confounding_experiment, run_control_experiment,
                                 run_schedule_experiment)

RRS = (1.0, 1.5, 2.0, 4.0)


@pytest.fixture
def verdict(capsys):
    def report(criterion: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return report


def _cached(name, params, compute):
    cache = os.environ.get("SEQSAFETY_ACCEPTANCE_CACHE")
    if not cache:
        return compute()
    key = hashlib.sha256(repr(params).encode()).hexdigest()[:16]
    path = Path(cache) / f"{name}_{key}.pkl"
    if path.exists():
        return pickle.loads(path.read_bytes())
    out = compute()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pickle.dumps(out))
    return out


@pytest.fixture(scope="session")
def control_sweep():
    ex = ControlExperiment()
    return _cached("controls", ex, lambda: run_control_experiment(ex, jobs=default_jobs()))


def test_criterion_1_planned_length_type1(verdict):
    start = time.perf_counter()
    res = run_schedule_experiment(ScheduleExperiment())
    elapsed = time.perf_counter() - start
    final = {plan: float(curve[-1]) for plan, curve in res["type1"].items()}
    ok = (0.035 <= final["oracle"] <= 0.065
          and final["hacky"] - final["oracle"] >= 0.02
          and final["early"] < final["oracle"]
          and elapsed < 600)
    verdict("criterion 1", ok,
            f"final Type 1 oracle={final['oracle']:.4f} (band 0.035-0.065), "
            f"hacky={final['hacky']:.4f} (gap {final['hacky'] - final['oracle']:+.4f}, need "
            f">= 0.02), early={final['early']:.4f}; cv={res['cv']}; {elapsed:.0f}s")


def test_criterion_2_confounded_comparator(verdict):
    res = run_confounding_experiment(100, jobs=default_jobs(),
                                     designs=("hc_unadjusted_tar42", "sccs_excl_pre30_tar42"))
    hc = res["hc_unadjusted_tar42"][:, -1]
    sccs = res["sccs_excl_pre30_tar42"][:, -1]
    truth = math.log(2.0)
    hc_high = np.mean(hc > 2.5)
    err_hc = np.abs(np.log(hc) - truth)
    err_sccs = np.abs(np.log(sccs) - truth)
    closer = np.mean(err_sccs < err_hc)  # NaN (non-estimable) never counts as closer
    med_err = float(np.nanmedian(err_sccs))
    ok = hc_high >= 0.9 and closer >= 0.9 and med_err > 0.05
    verdict("criterion 2", ok,
            f"HC RR>2.5 in {hc_high:.0%} of seeds (median {np.nanmedian(hc):.2f}); SCCS closer "
            f"in {closer:.0%} (median {np.nanmedian(sccs):.2f}); SCCS median |log error| "
            f"{med_err:.3f}")


def test_criterion_3_clean_bayes_signal(verdict):
    res = run_clean_bayes_experiment(50)
    months = np.array([np.inf if m is None else m for m in res["signal_month"]], dtype=float)
    median = float(np.median(months))
    decreasing = np.mean(np.all(np.diff(res["sd"], axis=1) < 0, axis=1))
    ok = abs(median - 9) <= 3 and decreasing >= 0.95
    verdict("criterion 3", ok,
            f"median signal month {median:g} (never signaled: {np.isinf(months).sum()}/50); "
            f"posterior sd strictly decreasing in {decreasing:.0%} of seeds")


def _final_type1(first, negatives):
    return float(np.mean(first[:, negatives] >= 0))


def test_criterion_4_bbc_calibration(control_sweep, verdict):
    r = control_sweep
    ex = r.experiment
    neg = r.negatives
    hc = ex.designs.index("hc_unadjusted_tar42")
    bbc_t1 = _final_type1(r.first_signal("bbc", hc, 0, 0.95), neg)
    max_t1 = _final_type1(r.first_signal("maxsprt", hc), neg)
    part_a = 0.01 <= bbc_t1 <= 0.12 and max_t1 > 0.20

    # (b) sweep cells: (seed, design, true RR) at the final look
    wins, cells = 0, 0
    for d in range(len(ex.designs)):
        bbc = r.estimates("bbc", d)[0][..., -1]
        mle = r.estimates("maxsprt", d)[0][..., -1]
        ok_est = r.estimable[:, d, :, -1]
        for s in range(r.truth.shape[0]):
            for rr in RRS:
                sel = (r.true_rr == rr) & ok_est[s]
                if not sel.any():
                    continue
                cells += 1
                err_bbc = np.nanmean((bbc[s, sel] - r.truth[s, sel]) ** 2)
                err_mle = np.nanmean((mle[s, sel] - r.truth[s, sel]) ** 2)
                wins += err_bbc < err_mle
    part_b = cells > 0 and wins / cells >= 0.8

    # (c) interval coverage per true RR at the final look, every design
    cover = {}
    for d, name in enumerate(ex.designs):
        for method in ("bbc", "maxsprt"):
            est, lo, hi = (a[..., -1] for a in r.estimates(method, d))
            for rr in RRS:
                sel = (r.true_rr == rr)[None, :] & r.estimable[:, d, :, -1]
                t = np.broadcast_to(r.truth, sel.shape)
                cover[name, method, rr] = float(np.mean((lo[sel] <= t[sel]) & (t[sel] <= hi[sel])))
    part_c = all(cover[n, "bbc", rr] >= 0.90 and cover[n, "maxsprt", rr] < cover[n, "bbc", rr]
                 for n in ex.designs for rr in RRS)
    cov_text = "; ".join(
        f"{n.split('_')[0]} RR{rr:g} BBC {cover[n, 'bbc', rr]:.3f} vs MLE {cover[n, 'maxsprt', rr]:.3f}"
        for n in ex.designs for rr in RRS)
    verdict("criterion 4", part_a and part_b and part_c,
            f"(a) HC final Type 1 BBC={bbc_t1:.3f} (0.01-0.12), MaxSPRT={max_t1:.3f} (>0.20): "
            f"{'ok' if part_a else 'no'}; (b) BBC MSE lower in {wins}/{cells} cells: "
            f"{'ok' if part_b else 'no'}; (c) coverage {cov_text}: {'ok' if part_c else 'no'}")


def test_criterion_5_matched_threshold_power(control_sweep, verdict):
    r = control_sweep
    ex = r.experiment
    neg = r.negatives
    lines, ok = [], True
    for d, name in enumerate(ex.designs):
        target = _final_type1(r.first_signal("maxsprt", d), neg)
        cal = calibrate_threshold(r.bbc_p1[:, d, 0][:, neg], target)
        for rr in (1.5, 2.0):
            sel = r.true_rr == rr
            p_max = cumulative_signal_rate(r.first_signal("maxsprt", d)[:, sel], ex.n_looks)
            p_bbc = cumulative_signal_rate(r.first_signal("bbc", d, 0, cal.delta1)[:, sel],
                                           ex.n_looks)
            gap = float(np.min(p_bbc[5:] - p_max[5:]))
            ok &= gap >= -0.05
            lines.append(f"{name.split('_')[0]} RR{rr:g} min(BBC-MaxSPRT power, months 6-12)="
                         f"{gap:+.3f}")
        sel = r.true_rr == 1.5
        ttd_max = time_to_detection(
            cumulative_signal_rate(r.first_signal("maxsprt", d)[:, sel], ex.n_looks), 0.5)
        ttd_bbc = time_to_detection(
            cumulative_signal_rate(r.first_signal("bbc", d, 0, cal.delta1)[:, sel], ex.n_looks),
            0.5)
        ttd_ok = ttd_bbc is not None and (ttd_max is None or ttd_bbc <= ttd_max + 1)
        ttd_ok |= ttd_bbc is None and ttd_max is None
        ok &= ttd_ok
        lines.append(f"{name.split('_')[0]} delta1={cal.delta1:.3f} (target Type 1 {target:.3f}, "
                     f"achieved {cal.achieved_type1:.3f}{', flagged' if cal.flagged else ''}) "
                     f"ttd50 RR1.5 BBC={ttd_bbc} MaxSPRT={ttd_max}")
    verdict("criterion 5", bool(ok), "; ".join(lines))


def test_criterion_6_oracle_suites(verdict):
    start = time.perf_counter()
    checks = {}

    rng = np.random.default_rng(6)
    worst = 0.0
    n_pairs = 0
    while n_pairs < 200:
        mu = rng.uniform(1, 100)
        c = int(rng.poisson(mu * rng.uniform(0.5, 2.0)))
        if c == 0 or abs(math.log(c / mu)) > 3.9:
            continue
        n_pairs += 1
        worst = max(worst, abs(llr_statistic(poisson_profile(c, mu)) - float(poisson_llr(c, mu))))
    checks["LLR grid vs closed form (200 pairs)"] = (worst < 1e-3, f"max err {worst:.2e}")

    worst = 0.0
    for mean, se, var in [(0.8, 0.4, 4.0), (-0.3, 0.2, 1.0), (0.1, 0.6, 0.5), (1.2, 0.15, 4.0)]:
        post = posterior(LikelihoodProfile.from_loglik(-0.5 * ((GRID - mean) / se) ** 2),
                         PriorSpec(var))
        prec = 1 / se**2 + 1 / var
        m, s = mean / se**2 / prec, math.sqrt(1 / prec)
        worst = max(worst, abs(post.mean - m), abs(post.sd - s), abs(post.median - m))
    checks["normal-normal posterior vs quadrature"] = (worst < 1e-3, f"max err {worst:.2e}")

    means = np.random.default_rng(1).normal(0.3, 0.25, 10)
    profs = [LikelihoodProfile.from_loglik(-0.5 * ((GRID - m) / 0.2) ** 2, event_counts=(10, 10))
             for m in means]
    tau, s2b = 0.15, 2.0
    var = 1 / (len(means) / (0.04 + tau**2) + 1 / s2b)
    target = var * means.sum() / (0.04 + tau**2)
    fit = fit_bias_model(profs, BiasModelSpec("normal", sigma2_b=s2b), McmcSpec(), fixed_tau=tau)
    mc_se = math.sqrt(var / fit.ess["b_bar"])
    z = abs(fit.b_bar.mean() - target) / mc_se
    checks["b_bar vs conjugate (known tau)"] = (z < 2, f"{z:.2f} MC SEs")

    exact = True
    for c, mu in [(12, 10.0), (40, 25.0), (3, 8.0)]:
        nc = poisson_profile(c, mu)
        for rr in (1.5, 2.0, 4.0):
            pc = synthesize_positive_profile(nc, rr)
            k = round(math.log(rr) / GRID_STEP)
            exact &= abs(pc.shift - k * GRID_STEP) < 1e-12
            exact &= np.allclose(np.diff(pc.loglik[k:]), np.diff(nc.loglik[:-k]), atol=1e-12)
    checks["positive-control shift exactness"] = (bool(exact), "grid translation exact")

    sched = SurveillanceSchedule(24, 10.0, 0.05)
    # the oracle-schedule cv of criterion 1, checked on fresh replicates
    cv = compute_cv(sched, mc_replicates=100_000, stream=RandomStream(0, ("schedule", "cv", 24)))
    t1 = empirical_type1(cv.cv, sched, 100_000, RandomStream(1, ("cv-check",)))
    checks["cv self-consistency"] = (0.04 <= t1 <= 0.05, f"re-simulated Type 1 {t1:.4f}")

    light = McmcSpec(3000, 500, 5, 4)
    a = fit_bias_model(profs, BiasModelSpec(), light, stream=RandomStream(3))
    b = fit_bias_model(profs, BiasModelSpec(), light, stream=RandomStream(3))
    same = np.array_equal(a.b_bar, b.b_bar) and np.array_equal(a.tau, b.tau)
    checks["MCMC determinism"] = (same, "identical draws" if same else "draws differ")

    std = fit_bias_model(profs, BiasModelSpec(), McmcSpec())
    rhat = max(std.rhat.values())
    checks["split R-hat on standard fixture"] = (rhat <= 1.1, f"max R-hat {rhat:.3f}")

    elapsed = time.perf_counter() - start
    checks["runtime < 120 s"] = (elapsed < 120, f"{elapsed:.1f}s")
    ok = all(v[0] for v in checks.values())
    verdict("criterion 6", ok, "; ".join(f"{k}: {'ok' if v[0] else 'FAIL'} ({v[1]})"
                                         for k, v in checks.items()))
