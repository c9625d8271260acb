"""SVG charts for metric tables, bias posteriors and the experiment outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MetricTable  # noqa: E402
from .io import read_csv  # noqa: E402

plt.rcParams["svg.hashsalt"] = "seqsafety"  # stable element ids across runs
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path: Path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return str(path)


def _method_label(row: dict) -> str:
    if row["method"] == "maxsprt":
        return "MaxSPRT"
    return f"{row['method']} {row['prior']} d={row['delta1']:g}"


def metric_panels(table: MetricTable, out_dir: Path) -> list[str]:
    """One figure per design: Type 1 and sensitivity by look for every method cell."""
    files = []
    for design in sorted({r["design"] for r in table.rows}):
        rows = [r for r in table.rows if r["design"] == design]
        rrs = sorted({r["true_rr"] for r in rows})
        fig, axes = plt.subplots(1, len(rrs), figsize=(4 * len(rrs), 3.5), squeeze=False)
        for ax, rr in zip(axes[0], rrs):
            metric = "type1" if rr == 1 else "sensitivity"
            keys = sorted({(r["method"], r["prior"], r["delta1"] or 0.0) for r in rows})
            for method, prior, delta1 in keys:
                sel = [r for r in rows if r["true_rr"] == rr and r["method"] == method
                       and r["prior"] == prior and (r["delta1"] or 0.0) == delta1]
                sel.sort(key=lambda r: r["look"])
                y = [np.nan if r[metric] is None else r[metric] for r in sel]
                ax.plot([r["look"] for r in sel], y, marker=".", label=_method_label(sel[0]))
            if rr == 1:
                ax.axhline(0.05, color="grey", lw=0.8, ls="--")
            ax.set_title(f"{design}  RR={rr:g}")
            ax.set_xlabel("look (month)")
            ax.set_ylabel(metric)
            ax.set_ylim(-0.02, 1.02)
        axes[0][-1].legend(fontsize=6, loc="lower right")
        fig.tight_layout()
        files.append(_save(fig, Path(out_dir) / f"metrics_{design}.svg"))
    return files


def bias_ridgeline(b_bar_by_look: dict[int, np.ndarray], tau_by_look: dict[int, np.ndarray],
                   path: Path, grid: np.ndarray | None = None, rng_seed: int = 0) -> str:
    """Stacked predictive bias densities, one ridge per look."""
    if grid is None:
        grid = np.linspace(-1.5, 2.0, 351)
    rng = np.random.default_rng(rng_seed)
    looks = sorted(b_bar_by_look)
    fig, ax = plt.subplots(figsize=(5, 0.45 * len(looks) + 1.5))
    for k, look in enumerate(looks):
        bb, tau = b_bar_by_look[look], tau_by_look[look]
        draws = bb + tau * rng.standard_normal(bb.size)  # tau is a scale
        hist, edges = np.histogram(draws, bins=grid)
        dens = hist / max(hist.max(), 1) * 0.9
        mid = 0.5 * (edges[1:] + edges[:-1])
        ax.fill_between(mid, k, k + dens, alpha=0.6, color="C0", lw=0.5)
    ax.axvline(0, color="grey", lw=0.8)
    ax.set_yticks(range(len(looks)))
    ax.set_yticklabels([str(t) for t in looks])
    ax.set_ylabel("look")
    ax.set_xlabel("systematic error b (log RR)")
    fig.tight_layout()
    return _save(fig, path)


def bias_ridgeline_from_csv(path: Path, out: Path) -> str | None:
    rows = read_csv(path)
    if not rows:
        return None
    by_look: dict[int, list] = {}
    for r in rows:
        by_look.setdefault(int(r["look"]), []).append((float(r["b_bar"]), float(r["tau"])))
    bb = {t: np.array([v[0] for v in vals]) for t, vals in by_look.items()}
    tau = {t: np.array([v[1] for v in vals]) for t, vals in by_look.items()}
    return bias_ridgeline(bb, tau, out)


def type1_curves(curves: dict[str, np.ndarray], path: Path, alpha: float = 0.05) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, y in curves.items():
        ax.plot(np.arange(1, len(y) + 1), y, marker=".", label=label)
    ax.axhline(alpha, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("look")
    ax.set_ylabel("cumulative Type 1 error")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def estimate_boxes(estimates: dict[str, np.ndarray], path: Path, truth: float) -> str:
    """Final-look log RR estimates per design against the true value."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = list(estimates)
    data = [np.asarray(v)[np.isfinite(v)] for v in estimates.values()]
    ax.boxplot(data, labels=labels, showfliers=False)
    ax.axhline(truth, color="C3", lw=0.8, ls="--")
    ax.set_ylabel("log RR estimate")
    ax.tick_params(axis="x", labelrotation=30, labelsize=7)
    fig.tight_layout()
    return _save(fig, path)


def posterior_trajectory(sd: np.ndarray, p_h1: np.ndarray, path: Path, delta1: float) -> str:
    """Median over seeds of posterior sd and P(H1) by month."""
    months = np.arange(1, sd.shape[1] + 1)
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    a.plot(months, np.median(sd, axis=0), marker=".")
    a.set_xlabel("month")
    a.set_ylabel("posterior sd")
    b.plot(months, np.median(p_h1, axis=0), marker=".")
    b.axhline(delta1, color="grey", lw=0.8, ls="--")
    b.set_xlabel("month")
    b.set_ylabel("P(H1 | data)")
    fig.tight_layout()
    return _save(fig, path)


def experiment_figures(results_dir: Path, out_dir: Path) -> list[str]:
    """Charts for whichever experiment CSVs are present in ``results_dir``."""
    results_dir, out_dir = Path(results_dir), Path(out_dir)
    files = []
    p = results_dir / "schedule_type1.csv"
    if p.exists():
        rows = read_csv(p)
        curves = {}
        for r in rows:
            curves.setdefault(r["plan"], []).append((int(r["look"]), float(r["type1"])))
        curves = {k: np.array([v for _, v in sorted(vals)]) for k, vals in curves.items()}
        files.append(type1_curves(curves, out_dir / "schedule_type1.svg"))
    p = results_dir / "confounding_estimates.csv"
    if p.exists():
        rows = [r for r in read_csv(p) if int(r["month"]) == 12]
        est = {}
        for r in rows:
            est.setdefault(r["design"], []).append(
                np.nan if r["log_rr"] == "NA" else float(r["log_rr"]))
        truth = float(rows[0]["true_log_rr"]) if rows else 0.0
        files.append(estimate_boxes({k: np.array(v) for k, v in est.items()},
                                    out_dir / "confounding_estimates.svg", truth))
    p = results_dir / "clean_trajectories.csv"
    if p.exists():
        rows = read_csv(p)
        seeds = sorted({int(r["seed"]) for r in rows})
        months = sorted({int(r["month"]) for r in rows})
        sd = np.full((len(seeds), len(months)), np.nan)
        ph1 = sd.copy()
        for r in rows:
            i, t = seeds.index(int(r["seed"])), months.index(int(r["month"]))
            sd[i, t], ph1[i, t] = float(r["sd"]), float(r["p_h1"])
        delta1 = float(rows[0]["delta1"]) if rows else 0.95
        files.append(posterior_trajectory(sd, ph1, out_dir / "clean_trajectories.svg", delta1))
    return files
