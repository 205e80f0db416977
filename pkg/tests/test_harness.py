import csv
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from gridsim.harness.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_OK, main
from gridsim.harness.config import ConfigError, PRESET_DIR, load_config
from gridsim.harness.metrics import RunResult
from gridsim.harness.oracle import event_driven, timestep_oracle
from gridsim.harness.output import (TRANSFERS_HEADER, dst_delivery_times, summarize, write_outputs)
from gridsim.harness.runner import point_dirname, sweep_points
from gridsim.network import TransferRecord

PRESETS = sorted(p.stem for p in PRESET_DIR.glob("*.cfg"))
TABLE_RTT_MS = {("T1-EU1", "T0"): 20, ("T1-EU2", "T0"): 25, ("T1-EU3", "T0"): 30,
                ("T1-US1", "T0"): 120, ("T1-US1", "T1-US2"): 60, ("T1-US1", "T1-JP"): 240}


def bad_cfg(tmp_path, edit):
    text = (PRESET_DIR / "t0t1_2h.cfg").read_text()
    p = tmp_path / "bad.cfg"
    p.write_text(edit(text))
    return p


# -- configuration ---------------------------------------------------------------------

@pytest.mark.parametrize("name", PRESETS)
def test_every_preset_validates(name):
    assert main(["validate", name]) == EXIT_OK


def test_t0t1_preset_has_six_t1_centers_and_table_rtts(capsys):
    cfg = load_config("t0t1")
    assert sorted(c for c in cfg.centers if c.startswith("T1")) == [
        "T1-EU1", "T1-EU2", "T1-EU3", "T1-JP", "T1-US1", "T1-US2"]
    topo = cfg.topology.build()
    for (a, b), ms in TABLE_RTT_MS.items():
        assert topo.rtt(a, b) == pytest.approx(ms / 1000)
    assert main(["validate", "t0t1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "T1-JP 240 ms" in out and "T0 120 ms" in out


def test_negative_link_capacity_names_the_link_and_line(tmp_path):
    p = bad_cfg(tmp_path, lambda t: t.replace("US1-JP:    {a: T1-US1, b: T1-JP, capacity: 10.0e9",
                                               "US1-JP:    {a: T1-US1, b: T1-JP, capacity: -1"))
    with pytest.raises(ConfigError) as err:
        load_config(p)
    line = next(i for i, l in enumerate(p.read_text().splitlines(), 1) if l.strip().startswith("US1-JP"))
    msg = str(err.value)
    assert "US1-JP" in msg and f":{line}:" in msg


def test_relay_cycle_is_rejected(tmp_path):
    p = bad_cfg(tmp_path, lambda t: t.replace("    T1-US1: [T1-US2, T1-JP]",
                                               "    T1-US1: [T1-US2]\n    T1-US2: [T1-US1]"))
    with pytest.raises(ConfigError, match="cycle"):
        load_config(p)


def test_unknown_keys_are_rejected(tmp_path):
    p = bad_cfg(tmp_path, lambda t: t.replace("metrics_interval: 60", "metrics_interval: 60\nmetrcs: 1"))
    with pytest.raises(ConfigError, match="metrcs"):
        load_config(p)


def test_cli_exit_codes(tmp_path, capsys):
    p = bad_cfg(tmp_path, lambda t: t.replace("capacity: 40.0e9", "capacity: -5"))
    assert main(["validate", str(p)]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    # a file bigger than disk plus tape aborts the run
    assert main(["run", "t0t1_2h", "--duration", "60", "--out", str(tmp_path / "abort"),
                 "--set", "centers.T0.disk=1.0e9", "--set", "centers.T0.tape=1.0e9"]) == EXIT_ABORT
    assert "simulation aborted" in capsys.readouterr().err


def test_tiny_duration_writes_header_only_transfers(tmp_path):
    out = tmp_path / "tiny"
    assert main(["run", "t0t1_2h", "--duration", "0.001", "--out", str(out)]) == EXIT_OK
    lines = (out / "transfers.csv").read_text().splitlines()
    assert lines == [",".join(TRANSFERS_HEADER)]
    assert "no DST transfers" in (out / "summary.txt").read_text()


def test_set_override_is_echoed_in_resolved_config(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "proof_small", "--out", str(out), "--set", "proof.p_local=1.0",
                 "--seed", "9"]) == EXIT_OK
    resolved = yaml.safe_load((out / "config.resolved.cfg").read_text())
    assert resolved["proof"]["p_local"] == 1.0 and resolved["seed"] == 9


def test_sweep_points_and_dirnames():
    pts = sweep_points([("a", [1, 2]), ("b", ["x", "y"])])
    assert pts == [{"a": 1, "b": "x"}, {"a": 1, "b": "y"}, {"a": 2, "b": "x"}, {"a": 2, "b": "y"}]
    assert point_dirname({"topology.links.T0-US1.capacity": 3e9}) == "topology.links.T0-US1.capacity=3000000000.0"
    assert sweep_points([]) == [{}]


def test_sweep_writes_one_output_set_per_point(tmp_path):
    out = tmp_path / "sw"
    assert main(["run", "proof_small", "--out", str(out), "--sweep", "proof.slaves_per_master=25,50",
                 "--set", "proof.events_per_request=20000"]) == EXIT_OK
    dirs = sorted(d.name for d in out.iterdir())
    assert dirs == ["proof.slaves_per_master=25", "proof.slaves_per_master=50"]
    for d in dirs:
        assert all((out / d / f).exists() for f in ("transfers.csv", "jobs.csv", "summary.txt"))


def test_sweep_rejects_bad_point_before_running(tmp_path):
    out = tmp_path / "sw"
    assert main(["run", "proof_small", "--out", str(out), "--sweep", "proof.p_local=0.5,2.0"]) == EXIT_CONFIG
    assert not out.exists()


# -- summaries ---------------------------------------------------------------------------

def _result_with(transfers):
    return RunResult(kind="t0t1", report={}, duration=100.0, transfers=transfers)


def test_mean_transfer_time_per_destination(tmp_path):
    recs = [TransferRecord("a", "RAW", "T0", "X", 1e9, 0.0, 10.0),
            TransferRecord("b", "RAW", "T0", "X", 1e9, 5.0, 25.0)]
    write_outputs(_result_with(recs), tmp_path)
    s = summarize(tmp_path)
    assert s["transfer_times"]["RAW"]["X"]["mean"] == pytest.approx(15.0)
    assert "DST" not in s["transfer_times"]
    assert "no DST transfers" in s["notes"]


def test_relayed_dst_time_counts_from_first_hop():
    rows = [{"file_id": "d", "class": "DST", "src": "T0", "dst": "US1", "t_start_s": "1", "t_end_s": "5"},
            {"file_id": "d", "class": "DST", "src": "US1", "dst": "JP", "t_start_s": "5", "t_end_s": "9"},
            {"file_id": "d", "class": "DST", "src": "T0", "dst": "EU1", "t_start_s": "1", "t_end_s": "2"}]
    assert dst_delivery_times(rows) == [("d", "EU1", 1.0), ("d", "JP", 8.0), ("d", "US1", 4.0)]


def test_all_series_mean_matches_recomputation_from_csv(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "t0t1_2h", "--duration", "1200", "--out", str(out)]) == EXIT_OK
    with open(out / "transfers.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    raw = [float(r["t_end_s"]) - float(r["t_start_s"]) for r in rows if r["class"] == "RAW"]
    s = summarize(out)
    per = s["transfer_times"]["RAW"]
    weighted = sum(v["mean"] * v["count"] for v in per.values()) / sum(v["count"] for v in per.values())
    assert s["all_series"]["RAW"]["mean"] == pytest.approx(np.mean(raw), rel=1e-12)
    assert weighted == pytest.approx(np.mean(raw), rel=1e-12)
    assert s["all_series"]["RAW"]["count"] == len(raw)


def test_link_csv_integrates_to_transfer_bytes(tmp_path):
    from gridsim.harness.runner import run_scenario
    cfg = load_config("t0t1_2h", {"duration": 1200})
    res = run_scenario(cfg)
    write_outputs(res, tmp_path)
    with open(tmp_path / "links.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    last, bits = {}, {}
    for r in rows:
        t = float(r["t_window_end_s"])
        bits[r["link_id"]] = bits.get(r["link_id"], 0.0) + float(r["avg_rate_bps"]) * (t - last.get(r["link_id"], 0.0))
        last[r["link_id"]] = t
    for ch, (total, _cap) in res.link_totals.items():
        assert bits.get(ch, 0.0) == pytest.approx(total, rel=1e-6, abs=1.0)
    assert res.audits["link_integrity"] == []


def test_identical_seed_gives_identical_files(tmp_path):
    for k in ("a", "b"):
        assert main(["run", "proof_small", "--out", str(tmp_path / k),
                     "--set", "proof.events_per_request=20000"]) == EXIT_OK
    for f in ("transfers.csv", "links.csv", "cpu.csv", "jobs.csv", "activities.csv", "summary.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_different_seed_changes_output(tmp_path):
    for k, seed in (("a", "1"), ("b", "2")):
        main(["run", "proof_small", "--out", str(tmp_path / k), "--seed", seed,
              "--set", "proof.events_per_request=20000"])
    assert (tmp_path / "a" / "jobs.csv").read_bytes() != (tmp_path / "b" / "jobs.csv").read_bytes()


# -- reference integrator -------------------------------------------------------------------

HAND_TRACE = {"resources": {"cpu": 10}, "claims": [{"id": "A", "work": 100, "join": 0},
                                                   {"id": "B", "work": 50, "join": 4}]}


def test_oracle_on_the_hand_trace():
    ref = timestep_oracle(HAND_TRACE, 1e-3)
    assert ref["A"] == pytest.approx(15.0, abs=0.01)
    assert ref["B"] == pytest.approx(14.0, abs=0.01)


def test_oracle_single_claim():
    dt = 0.01
    ref = timestep_oracle({"resources": {"r": 3.0}, "claims": [{"id": "x", "work": 10.0, "join": 1.0}]}, dt)
    assert abs(ref["x"] - (1.0 + 10.0 / 3.0)) <= dt


def test_oracle_matches_engine_on_twenty_random_claims():
    rng = np.random.default_rng(12)
    claims = [{"id": f"c{i}", "work": float(rng.uniform(1, 100)), "join": float(rng.uniform(0, 30)),
               "weight": float(rng.uniform(0.5, 2)), "resources": ["cpu"]} for i in range(20)]
    trace = {"resources": {"cpu": 10.0}, "claims": claims}
    ref = timestep_oracle(trace, 1e-3)
    got = event_driven(trace)
    for k in ref:
        assert got[k] == pytest.approx(ref[k], rel=5e-3)


def test_oracle_cli(tmp_path, capsys):
    p = tmp_path / "trace.yaml"
    p.write_text(yaml.safe_dump(HAND_TRACE))
    assert main(["oracle", str(p), "--dt", "0.001"]) == EXIT_OK
    lines = dict(l.split() for l in capsys.readouterr().out.splitlines())
    assert float(lines["A"]) == pytest.approx(15.0, abs=0.01)
    assert main(["oracle", str(p), "--dt", "0"]) == EXIT_CONFIG
    assert main(["oracle", str(tmp_path / "nope.yaml"), "--dt", "1"]) == EXIT_CONFIG


def test_console_script_runs():
    out = subprocess.run([sys.executable, "-m", "gridsim.harness.cli", "validate", "proof_small"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "ok" in out.stdout
