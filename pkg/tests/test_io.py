import math

import numpy as np
import pytest

from seqsafety.designs import poisson_profile
from seqsafety.io import (config_hash, format_value, load_config, make_manifest, manifest_hash,
                          read_comments, read_csv, read_profile_csv, run_hash, validate_config,
                          write_csv, write_profile_csv)
from seqsafety.simulation import ConfigError


def test_format_value():
    assert format_value(None) == "NA" and format_value(float("nan")) == "NA"
    assert format_value(np.float64(0.1)) == "0.1"
    assert format_value(np.int64(3)) == "3" and format_value(np.bool_(True)) == "True"
    assert format_value(float("inf")) == "inf"


def test_csv_round_trip_with_header(tmp_path):
    p = tmp_path / "a" / "x.csv"
    write_csv(p, ["a", "b"], [(1, 0.5), (2, None)], "manifest: 123")
    text = p.read_bytes()
    assert text.startswith(b"# manifest: 123\na,b\n") and b"\r" not in text
    assert read_csv(p) == [{"a": "1", "b": "0.5"}, {"a": "2", "b": "NA"}]
    assert read_comments(p) == ["manifest: 123"]
    assert not list(p.parent.glob(".*tmp"))


def test_profile_csv_round_trip(tmp_path):
    prof = poisson_profile(12, 7.5, design="hc_unadjusted_tar42", look=3)
    write_profile_csv(tmp_path / "p.csv", prof, "manifest: x")
    back = read_profile_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.loglik, prof.loglik)
    assert back.mle == prof.mle and back.look == 3 and back.event_counts == (12, 0)
    assert back.design == prof.design and back.estimable


def test_config_validation(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[run]\nmaster_seed = 3\n[bayes]\nthresholds = [0.9, 1]\n')
    cfg = load_config(p)
    assert cfg["bayes"]["thresholds"] == [0.9, 1.0]
    for bad, key in [({"nope": {}}, "[nope]"), ({"run": {"x": 1}}, "[run].x"),
                     ({"run": {"master_seed": "a"}}, "[run].master_seed"),
                     ({"run": {"master_seed": True}}, "[run].master_seed"),
                     ({"designs": {"names": "hc"}}, "[designs].names")]:
        with pytest.raises(ConfigError, match=key.replace("[", r"\[").replace("]", r"\]")):
            validate_config(bad)
    p.write_text("[run\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_hashes_ignore_timestamps_but_not_content():
    a = make_manifest("x", {"a": 1}, 0, {}, {"f": "h"}, "t0", "1")
    b = make_manifest("x", {"a": 1}, 0, {}, {"f": "h"}, "t1", "1")
    assert a["manifest_hash"] == b["manifest_hash"] == manifest_hash(a)
    c = make_manifest("x", {"a": 2}, 0, {}, {"f": "h"}, "t0", "1")
    assert c["manifest_hash"] != a["manifest_hash"]
    assert run_hash("x", {"a": 1}, 0) != run_hash("x", {"a": 1}, 1)
    assert config_hash({"b": 1, "a": 2}) == config_hash({"a": 2, "b": 1})
    assert math.isfinite(len(a["manifest_hash"]))


def test_resolve_config_rejects_bad_values():
    from seqsafety.pipeline import resolve_config

    for bad in ({"maxsprt": {"mc_replicates": 5000}}, {"maxsprt": {"alpha": 1.5}},
                {"scenario": {"n_looks": 13}}, {"designs": {"names": ["nope"]}},
                {"bayes": {"thresholds": [0.4]}}):
        with pytest.raises(ConfigError):
            resolve_config(bad)
    assert resolve_config({}, seed=9)["run"]["master_seed"] == 9
