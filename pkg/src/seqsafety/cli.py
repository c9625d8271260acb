"""Command line entry point.

Exit codes: 0 success, 1 bad configuration, 2 file I/O failure, 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, pipeline
from .io import file_sha256, load_config, make_manifest, now_iso, run_hash, write_csv, write_manifest
from .simulation import ConfigError

log = logging.getLogger("seqsafety")

EXIT_CONFIG, EXIT_IO, EXIT_INTERNAL = 1, 2, 3


def _config(args) -> dict:
    raw = load_config(args.config) if args.config else {}
    return pipeline.resolve_config(raw, args.seed)


def cmd_simulate(args) -> None:
    cfg = _config(args)
    m = pipeline.simulate(cfg, Path(args.out))
    print(f"simulated {len(m['outputs'])} files into {args.out} (manifest {m['manifest_hash']})")


def cmd_cv(args) -> None:
    from .maxsprt import SurveillanceSchedule

    cfg = _config(args)
    out = Path(args.out)
    looks = args.looks or [cfg["scenario"]["n_looks"]]
    schedules = [SurveillanceSchedule(n, args.expected, cfg["maxsprt"]["alpha"]) for n in looks]
    rows = pipeline.compute_cv_table(cfg, out, schedules)
    header = "manifest: " + run_hash("cv", cfg, cfg["run"]["master_seed"],
                                     [looks, args.expected, __version__])
    write_csv(out / "cv.csv", ["planned_looks", "alpha", "mc_replicates", "cache_key", "cv",
                               "empirical_alpha"], rows, header)
    for r in rows:
        print(f"looks={r[0]} alpha={r[1]:g} cv={r[4]:.4f} empirical alpha={r[5]:.4f}")


def cmd_analyze(args) -> None:
    cfg = _config(args)
    m = pipeline.analyze(Path(args.data), cfg, Path(args.out), args.jobs, args.resume)
    print(f"analyzed into {args.out}: {len(m['outputs'])} files, {len(m['failures'])} failures")
    if m["failures"]:
        raise RuntimeError(f"{len(m['failures'])} design(s) failed; see log")


def cmd_calibrate(args) -> None:
    out = Path(args.out)
    rows = pipeline.calibrate(Path(args.results), out / "calibration.csv")
    for r in rows:
        flag = " (flagged: no threshold reaches target)" if r[6] else ""
        print(f"{r[0]} prior={r[1]:g}: target {r[3]:.3f} -> delta1 {r[4]:.3f}{flag}")


def cmd_report(args) -> None:
    outputs = pipeline.report(Path(args.results), Path(args.out))
    for name in sorted(outputs):
        print(name)


def cmd_experiment(args) -> None:
    from . import scenarios

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = now_iso()
    seed = args.seed or 0
    params = {"name": args.name, "seeds": args.seeds}
    header = "manifest: " + run_hash("experiment", params, seed, __version__)
    if args.name == "schedule":
        ex = scenarios.ScheduleExperiment(n_seeds=args.seeds or 500, master_seed=seed)
        res = scenarios.run_schedule_experiment(ex)
        write_csv(out / "schedule_type1.csv", ["plan", "planned_looks", "cv", "look", "type1"],
                  [(plan, ex.planned[plan], res["cv"][plan], t + 1, y)
                   for plan, ys in res["type1"].items() for t, y in enumerate(ys)], header)
    elif args.name == "confounding":
        res = scenarios.run_confounding_experiment(args.seeds or 100, seed, jobs=args.jobs)
        write_csv(out / "confounding_estimates.csv",
                  ["seed", "design", "month", "rr", "log_rr", "true_log_rr"],
                  [(s, d, t + 1, rr[s, t], np.log(rr[s, t]), np.log(2.0))
                   for d, rr in res.items() for s in range(rr.shape[0])
                   for t in range(rr.shape[1])], header)
    elif args.name == "clean":
        res = scenarios.run_clean_bayes_experiment(args.seeds or 50, seed)
        write_csv(out / "clean_trajectories.csv",
                  ["seed", "month", "sd", "p_h1", "median", "signal_month", "delta1"],
                  [(s, t + 1, res["sd"][s, t], res["p_h1"][s, t], res["median"][s, t],
                    res["signal_month"][s], 0.95)
                   for s in range(res["sd"].shape[0]) for t in range(res["sd"].shape[1])], header)
    else:
        ex = scenarios.ControlExperiment(n_seeds=args.seeds or 100, master_seed=seed)
        res = scenarios.run_control_experiment(ex, jobs=args.jobs)
        res.metric_table().to_csv(out / "controls_metrics.csv", header)
    outputs = {p.name: file_sha256(p) for p in sorted(out.glob("*.csv"))}
    write_manifest(out / "manifest.json",
                   make_manifest("experiment", params, seed, {}, outputs, started, __version__))
    print(f"wrote {args.name} results into {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqsafety",
                                     description="Sequential vaccine safety surveillance")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--seed", type=int, help="override [run].master_seed")
        p.add_argument("--jobs", type=int, default=pipeline.default_jobs(),
                       help="worker processes")
        p.add_argument("--resume", action="store_true",
                       help="skip cells already written by an identical run")

    p = sub.add_parser("simulate", help="simulate a cohort and its outcomes")
    common(p, "output data directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cv", help="MaxSPRT critical values (cached)")
    common(p, "output directory for cv.csv and the cache")
    p.add_argument("--looks", type=int, nargs="*", help="planned look counts")
    p.add_argument("--expected", type=float, default=10.0,
                   help="expected null events per look")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("analyze", help="run every method on a simulated data directory")
    p.add_argument("data", help="directory written by 'simulate'")
    common(p, "output results directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("calibrate", help="match BBC thresholds to MaxSPRT's Type 1")
    p.add_argument("results", help="directory written by 'analyze'")
    common(p, "output directory for calibration.csv")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="metric table and SVG figures")
    p.add_argument("results", help="directory written by 'analyze' or 'experiment'")
    common(p, "output report directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("experiment", help="run a built-in simulation study")
    p.add_argument("name", choices=["schedule", "confounding", "clean", "controls"])
    common(p, "output results directory")
    p.add_argument("--seeds", type=int, help="number of simulation seeds")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
