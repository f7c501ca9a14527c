import json
import subprocess
import sys

import numpy as np
import pytest

from cablegff import cli, experiments
from cablegff.config import ConfigError, defaults, env_overrides, load_config, parse_text
from cablegff.experiments import Estimate, ExperimentResult, emit_report, parallel_map, run, trend_z
from cablegff.streams import replica_streams, stream, tag_key

SMALL_RENORM = """
[experiment]
kind = renorm-cert
replicas = 1500
seed = 3

[renorm]
paths = 1
grids = 10
q = 0.03
"""


def test_defaults_cover_schema():
    v = defaults()
    assert v["experiment"]["d"] == 3 and v["constants"]["halo_factor"] == 2.0
    assert v["levels"]["h"][0] == 0.0 and v["levels"]["h"][-1] == 0.8


def test_unknown_key_reports_line():
    text = "[experiment]\nkind = flip\n\n[sizes]\nwindow = 4\nwidth = 3\n"
    with pytest.raises(ConfigError, match=r"cfg.ini:6: unknown key 'width'"):
        parse_text(text, "cfg.ini")


def test_bad_value_reports_line():
    text = "[experiment]\nkind = flip\nseed = abc\n"
    with pytest.raises(ConfigError, match=r":3: bad value for experiment.seed"):
        parse_text(text, "c")


def test_unknown_section():
    with pytest.raises(ConfigError, match=r"unknown section \[extras\]"):
        parse_text("[extras]\na = 1\n", "c")


def test_json_config():
    v = parse_text(json.dumps({"experiment": {"kind": "flip", "seed": 9}, "sizes": {"L": [8, 16]}}))
    assert v["experiment"]["seed"] == 9 and v["sizes"]["L"] == [8, 16]
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_text("{ nope")


def test_list_parsing():
    v = parse_text("[levels]\nu = 0.25, 1\nh = 0 0.1 0.2\n")
    assert v["levels"]["u"] == [0.25, 1.0] and v["levels"]["h"] == [0.0, 0.1, 0.2]


def test_dimension_two_rejected():
    with pytest.raises(ConfigError, match="transient"):
        load_config(text="[experiment]\nkind = flip\nd = 2\n", environ={})


def test_kind_required_and_known():
    with pytest.raises(ConfigError, match="required"):
        load_config(text="", environ={})
    with pytest.raises(ConfigError, match="unknown experiment kind"):
        load_config(text="[experiment]\nkind = nothing\n", environ={})


def test_positive_counts():
    for bad in ("replicas = 0", "threads = 0"):
        with pytest.raises(ConfigError):
            load_config(text=f"[experiment]\nkind = flip\n{bad}\n", environ={})
    with pytest.raises(ConfigError):
        load_config(text="[experiment]\nkind = flip\n[levels]\nu = 0\n", environ={})


def test_precedence_file_env_cli():
    text = "[experiment]\nkind = flip\nseed = 1\nreplicas = 10\n[flip]\ninner_replicas = 50\n"
    env = {"CABLEGFF_SEED": "2", "CABLEGFF_REPLICAS": "20", "CABLEGFF_FLIP_INNER_REPLICAS": "60", "HOME": "/x"}
    cfg = load_config(text=text, environ=env, overrides={("experiment", "seed"): 3, ("experiment", "threads"): None})
    assert cfg.seed == 3 and cfg.replicas == 20 and cfg.get("flip", "inner_replicas") == 60
    assert cfg.overrides["experiment.seed"] == 3


def test_unknown_environment_variable():
    with pytest.raises(ConfigError, match="CABLEGFF_NOPE"):
        env_overrides({"CABLEGFF_NOPE": "1"})
    with pytest.raises(ConfigError, match="unknown key"):
        env_overrides({"CABLEGFF_FLIP_NOPE": "1"})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="no such file"):
        load_config(tmp_path / "absent.ini", environ={})


def test_hash_ignores_output_location():
    a = load_config(text="[experiment]\nkind = flip\nout = a\n", environ={})
    b = load_config(text="[experiment]\nkind = flip\nout = b\nthreads = 4\n", environ={})
    c = load_config(text="[experiment]\nkind = flip\nseed = 1\n", environ={})
    assert a.hash() == b.hash() != c.hash() and len(a.hash()) == 16


def test_streams_replayable():
    a = [g.random(3) for g in replica_streams(5, "x", 4)]
    assert np.array_equal(a[2], stream(5, "x", 2).random(3))
    assert not np.array_equal(a[0], a[1])
    assert not np.array_equal(stream(5, "x", 0).random(3), stream(5, "y", 0).random(3))
    assert tag_key("x") == tag_key("x") < 2 ** 32


def _square(a, b):
    return a * b


def test_parallel_map_keeps_order():
    tasks = [(i, i + 1) for i in range(6)]
    assert parallel_map(_square, tasks, 1) == parallel_map(_square, tasks, 2) == [i * (i + 1) for i in range(6)]


def test_trend_z_sign():
    assert trend_z(80, 100, 50, 100) < -3 < 3 < trend_z(50, 100, 80, 100)
    assert trend_z(50, 100, 50, 100) == 0


def test_estimates_carry_fields():
    e = Estimate.proportion(3, 10, 7).to_json()
    assert set(e) == {"point", "ci_lo", "ci_hi", "replicas", "seed"}
    assert e["ci_lo"] < 0.3 < e["ci_hi"] and e["replicas"] == 10 and e["seed"] == 7


def _report(tmp_path, name, ts="T"):
    cfg = load_config(text=SMALL_RENORM, environ={})
    res = run(cfg)
    paths = emit_report(res, cfg, tmp_path / name, timestamp=ts)
    return res, json.loads((tmp_path / name / "report.json").read_text()), paths


def test_report_is_deterministic(tmp_path):
    res, a, pa = _report(tmp_path, "a", "T1")
    _, b, pb = _report(tmp_path, "b", "T2")
    assert a.pop("timestamp") == "T1" and b.pop("timestamp") == "T2"
    assert a == b
    for name in pa["csv"]:
        assert open(pa["csv"][name]).read() == open(pb["csv"][name]).read()
    assert res.passed and a["passed"]
    assert a["config_hash"] and a["schema_version"] == experiments.SCHEMA_VERSION
    for est in a["estimates"].values():
        assert set(est) == {"point", "ci_lo", "ci_hi", "replicas", "seed"}
    assert a["seeds"]["master"] == 3


def test_failed_runner_marks_incomplete(monkeypatch):
    def boom(cfg, res):
        res.checks["partial"] = True
        raise RuntimeError("disk full")

    monkeypatch.setitem(experiments._RUNNERS, "flip", boom)
    res = run(load_config(text="[experiment]\nkind = flip\n", environ={}))
    assert res.incomplete and not res.passed and res.checks == {"partial": True}


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL_RENORM)
    for k in [k for k in __import__("os").environ if k.startswith("CABLEGFF_")]:
        monkeypatch.delenv(k)
    assert cli.main(["renorm-cert", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "report.json").exists()

    def failing(c):
        r = ExperimentResult(c.kind)
        r.checks["made_up"] = False
        return r

    monkeypatch.setattr(cli, "run", failing)
    assert cli.main(["flip", "--out", str(tmp_path / "p")]) == 1
    assert "FAILED made_up" in capsys.readouterr().out

    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nkind = flip\nd = 2\n")
    assert cli.main(["flip", "--config", str(bad)]) == 2
    assert "transient" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["not-a-kind"])
    assert exc.value.code == 2


def test_cli_unwritable_output(tmp_path, monkeypatch):
    blocker = tmp_path / "file"
    blocker.write_text("")
    monkeypatch.setattr(cli, "run", lambda c: ExperimentResult(c.kind))
    assert cli.main(["flip", "--out", str(blocker / "sub")]) == 1


def test_console_module_runs():
    out = subprocess.run([sys.executable, "-m", "cablegff.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "renorm-cert" in out.stdout
