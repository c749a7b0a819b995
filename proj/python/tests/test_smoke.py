import json
from pathlib import Path

import pytest

import fartune

REPO = Path(__file__).resolve().parents[2]


def small_config(tmp_path, **model):
    cfg = json.loads((REPO / "configs" / "synthetic.json").read_text())
    cfg["model"].update({"num_layers": 1, "d_model": 16, "d_ff": 32, **model})
    cfg["train"].update({"max_epochs": 1, "seeds": [0, 1]})
    cfg["data"]["synthetic"].update({"train_size": 64, "dev_size": 16, "test_size": 16})
    cfg["output"]["directory"] = str(tmp_path / "run")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_select_count():
    assert fartune.select_count(10, 3072) == 307
    assert fartune.select_count(0.001, 10) == 1
    with pytest.raises(fartune.InputError):
        fartune.select_count(0, 10)


def test_paper_scale_counts():
    counts = fartune.parameter_counts()
    assert counts["ffn_weights"] == 28_311_552
    assert 0.59 <= fartune.frozen_share(10) <= 0.61


def test_verify_and_fault():
    assert all(c["passed"] for c in fartune.verify())
    failed = {c["name"] for c in fartune.verify("skip-permutation") if not c["passed"]}
    assert "equivalence.logits" in failed


def test_train_summary(tmp_path):
    summary = fartune.train(small_config(tmp_path), far__r=25, far__selection_mode="random")
    assert summary["selection_mode"] == "random"
    assert summary["r"] == 25
    assert len(summary["scores"]) == 2
    assert 0.0 <= summary["mean"] <= 1.0


def test_config_errors_are_typed(tmp_path):
    with pytest.raises(fartune.ConfigError, match="far.q"):
        fartune.train(small_config(tmp_path), far__q=1)
    assert issubclass(fartune.ConfigError, fartune.FarError)


def test_cli_round_trip(tmp_path):
    cfg = small_config(tmp_path)
    result = fartune.cli("train", cfg, "--far.r=10")
    assert result.code == 0, result.stderr
    assert (tmp_path / "run" / "summary.json").exists()
    report = fartune.cli("report", tmp_path / "run")
    assert report.code == 0
    assert report.stdout.splitlines()[1].startswith("10\t")
    assert fartune.cli("train", tmp_path / "missing.json").code == 2
