import csv
import json
import os

import pytest

from cli import main
from conftest import tiny_config, write_config
from main import load_detector
from ood_scores import read_score_dump


@pytest.fixture
def config_path(tmp_path):
    return write_config(tiny_config(tmp_path), tmp_path / "experiment.json")


def _run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_generate_writes_dataset(tmp_path, capsys, config_path):
    out = tmp_path / "data" / "synthetic.csv"
    code, stdout, _ = _run(capsys, "generate", "--config", config_path, "--out", str(out))
    assert code == 0
    summary = json.loads(stdout)
    assert summary == {"path": str(out), "samples": 120, "classes": 4, "feature_dim": 4}
    assert out.read_text(encoding="utf-8").startswith("f0,f1,f2,f3,label")


def test_generate_seed_changes_data(tmp_path, capsys, config_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _run(capsys, "generate", "--config", config_path, "--out", str(a), "--seed", "1")
    _run(capsys, "generate", "--config", config_path, "--out", str(b), "--seed", "2")
    assert a.read_text(encoding="utf-8") != b.read_text(encoding="utf-8")


def test_unknown_subcommand(capsys):
    code, _, stderr = _run(capsys, "frobnicate")
    assert code == 2
    assert "usage:" in stderr


def test_missing_config(tmp_path, capsys):
    code, _, stderr = _run(capsys, "sweep", "--config", str(tmp_path / "absent.json"))
    assert code == 1
    assert "error: ConfigError" in stderr


def test_invalid_config_value(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"alpha": 2.0}', encoding="utf-8")
    code, _, stderr = _run(capsys, "sweep", "--config", str(path))
    assert code == 1
    assert "alpha" in stderr


def test_hier_training_requires_beta(tmp_path, capsys, config_path):
    code, _, stderr = _run(capsys, "train", "--config", config_path, "--scenario", "L22",
                           "--variant", "hier", "--out", str(tmp_path / "m.npz"))
    assert code == 1
    assert "--beta" in stderr


def test_train_score_calibrate_evaluate(tmp_path, capsys, config_path):
    model = tmp_path / "models" / "l22.npz"
    code, stdout, _ = _run(capsys, "train", "--config", config_path, "--scenario", "L22", "--variant", "hier",
                           "--beta", "10", "--lr", "0.05", "--out", str(model))
    assert code == 0
    assert json.loads(stdout)["path"] == str(model)

    scores = tmp_path / "scores.csv"
    code, stdout, _ = _run(capsys, "score", "--config", config_path, "--model", str(model),
                           "--method", "msp", "--method", "dmd", "--out", str(scores))
    assert code == 0
    assert json.loads(stdout)["methods"] == ["msp", "dmd"]
    records = read_score_dump(str(scores))
    assert {r.split for r in records} == {"val", "test"}
    assert {r.beta for r in records if r.method == "msp"} == {10.0}
    assert sum(r.is_novel for r in records) == 60

    code, stdout, _ = _run(capsys, "calibrate", "--scores", str(scores), "--model", str(model))
    assert code == 0
    thresholds = json.loads(stdout)["thresholds"]
    assert set(thresholds) == {"msp", "dmd"}
    stored = load_detector(str(model)).thresholds
    assert stored == {m: t["threshold"] for m, t in thresholds.items()}

    code, stdout, _ = _run(capsys, "evaluate", "--scores", str(scores))
    assert code == 0
    summary = json.loads(stdout)
    assert 0.0 <= summary["msp"]["auroc"] <= 1.0
    assert summary["msp"]["novel"] == 30
    assert summary["msp"]["threshold"] == thresholds["msp"]["threshold"]


def test_sweep_then_report(tmp_path, capsys, config_path):
    out = tmp_path / "sweep"
    code, stdout, _ = _run(capsys, "sweep", "--config", config_path, "--out", str(out))
    assert code == 0
    # flat: 2 seeds x 3 detectors; hier: 4 default sweep betas x 2 seeds x 3 detectors
    assert json.loads(stdout)["rows"] == 30
    with open(out / "sensitivity_L22.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["beta"] for r in rows} == {"0.1", "1.0", "10.0", "100.0"}
    assert all(r["n"] == "2" for r in rows)

    code, stdout, _ = _run(capsys, "report", "--results", str(out / "results.csv"), "--report-betas", "10")
    assert code == 0
    files = json.loads(stdout)["files"]
    assert os.path.join(str(out), "report", "report_L22.svg") in files


def test_sweep_uses_configured_grid(tmp_path, capsys):
    path = write_config(tiny_config(tmp_path, sweep_betas=[1.0], seeds=[0]), tmp_path / "experiment.json")
    code, stdout, _ = _run(capsys, "sweep", "--config", path, "--out", str(tmp_path / "sweep"))
    assert code == 0
    assert json.loads(stdout)["rows"] == 6
