import json

import pytest
import yaml

from covertsim.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from covertsim.configio import config_to_dict
from covertsim.harness import ingest_trace
from covertsim.simkernel import default_config


@pytest.fixture
def cfg(tmp_path):
    c = default_config(enforced_switch_duration=1000, sim_duration=60 * 10**9)
    path = tmp_path / "default.yaml"
    path.write_text(yaml.safe_dump(config_to_dict(c)))
    return path


def test_run_baseline(cfg, tmp_path, capsys):
    out = tmp_path / "t"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    trace = ingest_trace(out / "baseline.csv")
    assert not trace.metadata["attack"] and len(trace) > 100
    assert (out / "config.yaml").exists()
    assert "baseline.csv" in capsys.readouterr().out


def test_run_message_and_decode(cfg, tmp_path, capsys):
    out = tmp_path / "a"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--message", "0xDEADBEEF"]) == EXIT_OK
    truth = json.loads((out / "ground_truth.json").read_text())
    assert len(truth["bits"]) == 32 and truth["preamble_len"] == 16
    capsys.readouterr()
    assert main(["decode", "--trace", str(out / "attack.csv"), "--out", str(out)]) == EXIT_OK
    bits = capsys.readouterr().out.splitlines()[0]
    assert bits == "".join(map(str, truth["bits"]))
    assert json.loads((out / "decode.json").read_text())["ber"] == 0


def test_decode_closed_channel_falls_back(tmp_path, capsys):
    out = tmp_path / "c"
    args = ["run", "--out", str(out), "--message", "0xF0F0", "--set", "enforced_switch_duration=10ms",
            "--set", "sim_duration=60s"]
    assert main(args) == EXIT_OK
    assert main(["decode", "--trace", str(out / "attack.csv"), "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "decode.json").read_text())["channel_closed_at_calibration"] is True


def test_override_recorded(cfg, tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--set", "speed_exponent=2"]) == EXIT_OK
    meta = ingest_trace(out / "baseline.csv").metadata
    assert meta["speed_exponent"] == 2 and meta["overrides"] == ["speed_exponent=2"]


def test_env_output_dir(cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("COVERTSIM_OUT", str(tmp_path / "env"))
    assert main(["run", "--config", str(cfg), "--format", "json"]) == EXIT_OK
    assert (tmp_path / "env" / "baseline.json").exists()


def test_fresh_directories_byte_identical(cfg, tmp_path):
    for d in ("x", "y"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / d), "--seed", "4"]) == EXIT_OK
    assert (tmp_path / "x" / "baseline.csv").read_bytes() == (tmp_path / "y" / "baseline.csv").read_bytes()


@pytest.mark.parametrize("override,field", [
    ("nonexistent=1", "nonexistent"),
    ("boards.1.tse_offset=200ms", "tse_offset"),
])
def test_invalid_config_exit_code(cfg, tmp_path, capsys, override, field):
    before = cfg.read_bytes()
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "bad"), "--set", override]) == EXIT_INVALID
    assert field in capsys.readouterr().err
    assert not (tmp_path / "bad").exists()
    assert cfg.read_bytes() == before


def test_assess_and_digest_mismatch(cfg, tmp_path, capsys):
    w, wo = tmp_path / "with", tmp_path / "without"
    assert main(["run", "--config", str(cfg), "--out", str(w), "--message", "1" * 64, "--preamble-len", "0"]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(wo), "--seed", "1"]) == 0
    capsys.readouterr()
    assert main(["assess", "--with", str(w / "attack.csv"), "--without", str(wo), "--out", str(tmp_path)]) == EXIT_OK
    assert "feasible=True" in capsys.readouterr().out
    assert json.loads((tmp_path / "verdict.json").read_text())["feasible"] is True
    other = tmp_path / "other"
    assert main(["run", "--config", str(cfg), "--out", str(other), "--set", "speed_exponent=1"]) == 0
    assert main(["assess", "--with", str(w / "attack.csv"), "--without", str(other)]) == EXIT_INVALID


def test_plan_and_report(tmp_path, capsys):
    plan = tmp_path / "plan.yaml"
    plan.write_text(yaml.safe_dump({
        "switch_durations": ["10ms", "1us"], "tick_frequencies": [10], "benign_board_counts": [1],
        "speed_exponents": [0], "repetitions": 1, "sim_duration": "60s",
    }))
    out = tmp_path / "res"
    assert main(["plan", "--config", str(plan), "--out", str(out), "--jobs", "1"]) == EXIT_OK
    assert "1 feasible" in capsys.readouterr().out
    assert {"plan.json", "verdicts.csv", "report.md", "traces", "histograms"} <= {p.name for p in out.iterdir()}
    assert main(["report", "--out", str(out)]) == EXIT_OK
    assert "Feasible channels" in capsys.readouterr().out
    assert main(["report", "--out", str(tmp_path / "nothing")]) == EXIT_INVALID


def test_plan_unknown_key(tmp_path):
    plan = tmp_path / "plan.yaml"
    plan.write_text("grid: 3\n")
    assert main(["plan", "--config", str(plan), "--out", str(tmp_path)]) == EXIT_INVALID


def test_ingest_and_calibrate(cfg, tmp_path, capsys):
    raw = tmp_path / "raw.txt"
    raw.write_text("100\n300\n600\n")
    assert main(["ingest", str(raw), "--out", str(tmp_path), "--meta", "config_digest=ext",
                 "--meta", "attack=false", "--meta", "counter_freq=1500000000"]) == EXIT_OK
    assert ingest_trace(tmp_path / "raw.ingested.csv").delta_ticks.tolist() == [200, 300]
    assert main(["ingest", str(raw), "--out", str(tmp_path)]) == EXIT_INVALID

    ref = tmp_path / "ref"
    assert main(["run", "--config", str(cfg), "--out", str(ref)]) == EXIT_OK
    capsys.readouterr()
    assert main(["calibrate", "--config", str(cfg), "--reference", str(ref / "baseline.csv"),
                 "--out", str(tmp_path)]) == EXIT_OK
    fitted = yaml.safe_load((tmp_path / "calibrated.yaml").read_text())
    assert abs(fitted["base_switch_cost"] - 4000) / 4000 < 0.1


def test_runtime_failure_exit_code(monkeypatch, cfg, tmp_path):
    import covertsim.cli as cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "run_simulation", boom)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_RUNTIME
