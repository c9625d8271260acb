"""Files: atomic CSV writes, TOML configs, run manifests, profile/posterior exports.

CSV files are comma-separated, UTF-8, LF line endings, and may start with
``#`` comment lines (the first one names the manifest hash).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .simulation import ConfigError

NA = "NA"


def format_value(v: Any) -> str:
    if v is None:
        return NA
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return NA
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write to a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(columns: Sequence[str], rows: Iterable[Sequence], header: str | None = None) -> str:
    lines = []
    if header:
        lines += [f"# {h}" for h in header.splitlines()]
    lines.append(",".join(columns))
    for r in rows:
        lines.append(",".join(format_value(v) for v in r))
    return "\n".join(lines) + "\n"


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence],
              header: str | None = None) -> None:
    atomic_write_text(path, csv_text(columns, rows, header))


def read_csv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def read_comments(path: str | Path) -> list[str]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln in fh:
            if not ln.startswith("#"):
                break
            out.append(ln[1:].strip())
    return out


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# configuration

CONFIG_SCHEMA: dict[str, dict[str, type | tuple]] = {
    "run": {"name": str, "master_seed": int, "n_seeds": int},
    "scenario": {
        "n_subjects": int, "baseline_log_rate": (list, float), "mean_log_rate": float,
        "seasonal_amplitude": float, "seasonal_peak_week": float, "true_log_rr": float,
        "covariate_effect": float, "covariate_prevalence": float,
        "historical_rate_multiplier": float, "risk_window_weeks": int, "n_weeks_total": int,
        "uptake_curve": (list, float), "coverage": float, "uptake_amplitude": float,
        "uptake_peak_week": float, "n_looks": int,
    },
    "controls": {"n_negative": int, "positive_rrs": (list, float), "bias_mean": float,
                 "bias_sd": float, "rate_low": float, "rate_high": float},
    "designs": {"names": (list, str)},
    "maxsprt": {"alpha": float, "mc_replicates": int},
    "bayes": {"prior_variances": (list, float), "thresholds": (list, float)},
    "bias": {"family": str, "t_dof": float, "mu_b": float, "sigma2_b": float,
             "sigma2_tau": float},
    "mcmc": {"total_iterations": int, "burn_in": int, "thin": int, "chains": int},
}


def _check_type(section: str, key: str, value, expected) -> Any:
    where = f"[{section}].{key}"
    if isinstance(expected, tuple):
        _, inner = expected
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be an array")
        return [_check_type(section, key, v, inner) for v in value]
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool) or not isinstance(value, expected):
        raise ConfigError(f"{where} must be of type {expected.__name__}")
    return value


def validate_config(raw: dict) -> dict:
    """Check sections and keys against the schema; unknown names are errors."""
    out: dict[str, dict] = {}
    for section, body in raw.items():
        if section not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        out[section] = {}
        for key, value in body.items():
            if key not in CONFIG_SCHEMA[section]:
                raise ConfigError(f"unknown config key [{section}].{key}")
            out[section][key] = _check_type(section, key, value, CONFIG_SCHEMA[section][key])
    return out


def load_config(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return validate_config(raw)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# manifests


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def make_manifest(command: str, config: dict, master_seed: int, seeds: dict,
                  outputs: dict[str, str], started: str, version: str) -> dict:
    body = {"tool_version": version, "command": command, "config": config,
            "master_seed": master_seed, "seeds": seeds, "outputs": outputs}
    return {**body, "manifest_hash": manifest_hash(body), "started": started,
            "finished": now_iso()}


def manifest_hash(body: dict) -> str:
    """Hash of everything except timestamps (and the hash itself)."""
    clean = {k: v for k, v in body.items()
             if k not in ("started", "finished", "manifest_hash")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()[:16]


def run_hash(command: str, config: dict, master_seed: int, extra: Any = None) -> str:
    """Hash of the inputs of a run; written into every CSV header before outputs exist."""
    payload = json.dumps([command, config, master_seed, extra], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def write_manifest(path: str | Path, manifest: dict) -> None:
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# domain exports


def write_profile_csv(path: str | Path, profile, header: str | None = None) -> None:
    meta = (f"design={profile.design} look={profile.look} "
            f"risk_count={profile.event_counts[0]} comparator_count={profile.event_counts[1]} "
            f"exposure={profile.exposure[0]!r},{profile.exposure[1]!r} "
            f"estimable={profile.estimable}")
    head = f"{header}\n{meta}" if header else meta
    write_csv(path, ["beta", "loglik"], zip(profile.grid, profile.loglik), head)


def read_profile_csv(path: str | Path):
    from .designs import LikelihoodProfile

    rows = read_csv(path)
    grid = np.array([float(r["beta"]) for r in rows])
    ll = np.array([float(r["loglik"]) for r in rows])
    meta = dict(kv.split("=", 1) for kv in read_comments(path)[-1].split())
    c = (int(meta["risk_count"]), int(meta["comparator_count"]))
    e = tuple(float(v) for v in meta["exposure"].split(","))
    look = None if meta["look"] == "None" else int(meta["look"])
    from .designs import GRID

    if np.array_equal(grid, GRID):
        grid = GRID
    return LikelihoodProfile.from_loglik(ll, grid=grid, informative=meta["estimable"] == "True",
                                         design=meta["design"], look=look, event_counts=c,
                                         exposure=e)


POSTERIOR_COLUMNS = ("look", "p_h1", "median", "lo95", "hi95", "bf10")


def posterior_rows(posteriors) -> list[tuple]:
    return [(p.look, p.p_h1, p.median, p.ci95[0], p.ci95[1], p.bf10) for p in posteriors]


BIAS_SAMPLE_COLUMNS = ("look", "chain", "iter", "b_bar", "tau")


def bias_sample_rows(bias, look: int) -> list[tuple]:
    rows = []
    for c in range(bias.b_bar.shape[0]):
        for i in range(bias.b_bar.shape[1]):
            rows.append((look, c, i, bias.b_bar[c, i], bias.tau[c, i]))
    return rows
