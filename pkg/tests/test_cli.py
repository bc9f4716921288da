import json

import pytest

from dyngrain.cli import EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, main
from helpers import tiny_config


@pytest.fixture
def cfg_file(tmp_path):
    cfg = tiny_config(tmp_path / "run")
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    return path


def test_full_pipeline(cfg_file, tmp_path, capsys):
    base = ["--config", str(cfg_file)]
    assert main(base + ["gen-data", "--preview", "2"]) == EXIT_OK
    assert len(list((tmp_path / "run" / "data").glob("*.png"))) == 2
    # later stages pick the config echo up from the run directory
    run = ["--out", str(tmp_path / "run")]
    assert main(run + ["calibrate"]) == EXIT_OK
    assert "thresholds" in json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    for stage in ("dvae", "grain", "content"):
        assert main(run + [f"train-{stage}", "--steps", "2"]) == EXIT_OK
    assert main(run + ["sample", "-n", "1", "--steps", "2", "--grain-source", "random"]) == EXIT_OK
    assert (tmp_path / "run" / "samples" / "sample_000.png").exists()
    assert main(run + ["sample", "-n", "0"]) == EXIT_OK


def test_env_out_dir(monkeypatch, tmp_path):
    monkeypatch.setenv("DYNGRAIN_OUT", str(tmp_path / "envrun"))
    monkeypatch.setenv("DYNGRAIN_THREADS", "1")
    assert main(["--set", "data={\"count\": 8, \"image_size\": 64}", "calibrate"]) == EXIT_OK
    assert (tmp_path / "envrun" / "config.json").exists()


def test_config_errors(tmp_path, capsys):
    assert main(["--out", str(tmp_path / "x"), "train-content"]) == EXIT_CONFIG
    assert "calibrate" in capsys.readouterr().err
    assert main(["--set", "nonsense=1", "analyze"]) == EXIT_CONFIG
    assert main(["--set", "novalue", "analyze"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["--config", str(bad), "analyze"]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "missing.json"), "analyze"]) == EXIT_CONFIG
    assert main(["verify", "nope"]) == EXIT_CONFIG


def test_analyze_json(tmp_path, capsys):
    out = tmp_path / "t.json"
    assert main(["analyze", "--json", str(out)]) == EXIT_OK
    rows = json.loads(out.read_text())
    assert {r["method"] for r in rows} >= {"dit-b/2", "d2it-xl"}
    assert "Param(M)" in capsys.readouterr().out


def test_verify_exit_codes(tmp_path):
    report = tmp_path / "r.json"
    assert main(["verify", "identity", "--json", str(report)]) == EXIT_OK
    assert all(r["passed"] for r in json.loads(report.read_text()))
    # the table suite includes the D2iT-L/XL FLOP rows, which do not reproduce
    code = main(["verify", "tables", "--json", str(report)])
    results = json.loads(report.read_text())
    assert code == (EXIT_OK if all(r["passed"] for r in results) else EXIT_VERIFY)
