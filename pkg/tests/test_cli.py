"""Command line contract: exit codes, stage sequencing, config merging, and
both pipeline modes run end to end on a small synthetic corpus."""

from __future__ import annotations

import json
import subprocess
import sys

import pytest

from conftest import labeled_catalog
from streamgate.catalog import read_manifest, write_manifest
from streamgate.cli import main

ARTIFACTS = [
    "catalog.jsonl",
    "filtered.jsonl",
    "quality_report.json",
    "enhanced.jsonl",
    "partition.json",
    "augmented_train.jsonl",
    "model.bin",
    "history.json",
    "predictions.csv",
    "report.json",
    "report.csv",
    "report.svg",
]


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert main(["predict", "--help"]) == 0
    out = capsys.readouterr().out
    assert "usage" in out


def test_module_entry_point_help():
    proc = subprocess.run(
        [sys.executable, "-m", "streamgate.cli", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "usage" in proc.stdout


def test_unknown_command_and_bad_flags(tmp_path):
    assert main(["--workdir", str(tmp_path), "frobnicate"]) == 1
    assert main(["--jobs", "many", "--workdir", str(tmp_path), "filter"]) == 1
    assert main(["--workdir", str(tmp_path), "ingest"]) == 1  # --input is required
    assert main(["--workdir", str(tmp_path), "partition", "--metric", "L3"]) == 1


def test_missing_model_is_validation_error(tmp_path, capsys):
    assert main(["--workdir", str(tmp_path), "predict"]) == 1
    assert "missing model file" in capsys.readouterr().err
    # infer mode checks the model before touching the input tree
    rc = main(["--workdir", str(tmp_path), "pipeline", "--mode", "infer",
               "--input", str(tmp_path)])
    assert rc == 1
    assert "missing model file" in capsys.readouterr().err
    assert not (tmp_path / "catalog.jsonl").exists()


def test_stage_order_guard(tmp_path, capsys):
    assert main(["--workdir", str(tmp_path), "filter"]) == 1
    assert "run the earlier stage first" in capsys.readouterr().err
    assert main(["--workdir", str(tmp_path), "train"]) == 1
    assert "run the earlier stage first" in capsys.readouterr().err


def test_missing_input_directory(tmp_path):
    rc = main(["--workdir", str(tmp_path), "ingest",
               "--input", str(tmp_path / "nowhere")])
    assert rc == 1


def test_config_file_must_be_object(tmp_path, capsys):
    listy = tmp_path / "cfg.json"
    listy.write_text("[1, 2]\n")
    assert main(["--config", str(listy), "--workdir", str(tmp_path), "filter"]) == 1
    assert "JSON object" in capsys.readouterr().err
    broken = tmp_path / "broken.json"
    broken.write_text("{nope")
    assert main(["--config", str(broken), "--workdir", str(tmp_path), "filter"]) == 1


def test_partition_flag_overrides_config(tmp_path):
    # partition reads only the manifest, so fabricated records are enough
    cat = labeled_catalog({"a": [1, 1, 4], "b": [4, 6], "c": [4, 6]})
    write_manifest(cat, tmp_path / "enhanced.jsonl")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"partition": {"theta": 0.5, "iterations": 150}}))
    rc = main(["--workdir", str(tmp_path), "--config", str(cfg),
               "partition", "--theta", "0.7"])
    assert rc == 0
    spec = json.loads((tmp_path / "partition.json").read_text())
    assert spec["config"]["theta"] == 0.7
    assert spec["config"]["iterations"] == 150
    assert spec["feasible"] is True


@pytest.fixture(scope="module")
def trained(small_corpus, tmp_path_factory):
    """Train pipeline run once over the session corpus, budget turned down."""
    root, _ = small_corpus
    wd = tmp_path_factory.mktemp("cli_train")
    proc = subprocess.run(
        [sys.executable, "-m", "streamgate.cli", "--workdir", str(wd), "--seed", "0",
         "pipeline", "--mode", "train", "--input", str(root),
         "--labels", str(root / "labels.csv"),
         "--crop-target", "64", "--epochs", "4", "--iterations", "300"],
        capture_output=True, text=True,
    )
    return wd, proc


def test_pipeline_train_produces_all_artifacts(trained):
    wd, proc = trained
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip().endswith("report.json")
    for name in ARTIFACTS:
        assert (wd / name).exists(), name
    history = json.loads((wd / "history.json").read_text())
    assert len(history["epochs"]) == 4
    assert set(history) == {"epochs", "model", "train"}
    catalog = read_manifest(wd / "catalog.jsonl")
    assert sum(1 for _ in catalog.labeled()) > 0
    quality = json.loads((wd / "quality_report.json").read_text())
    assert quality["dropped"] > 0  # the corpus plants defective frames


def test_pipeline_infer_reuses_model_preprocess(trained, small_corpus, tmp_path, capsys):
    wd, _ = trained
    root, _ = small_corpus
    rc = main(["--workdir", str(tmp_path), "pipeline", "--mode", "infer",
               "--input", str(root), "--model", str(wd / "model.bin")])
    err = capsys.readouterr().err
    assert rc == 0
    assert "evaluate.skipped reason=no labels in manifest" in err
    assert (tmp_path / "predictions.csv").exists()
    assert not (tmp_path / "report.json").exists()
    meta = json.loads((tmp_path / "enhance_meta.json").read_text())
    assert meta["params"]["crop_target"] == 64  # carried inside the weights file


def test_predict_rerun_is_byte_identical(trained):
    wd, _ = trained
    before = (wd / "predictions.csv").read_bytes()
    assert main(["--workdir", str(wd), "predict", "--split", "test"]) == 0
    assert (wd / "predictions.csv").read_bytes() == before


def test_evaluate_standalone(trained, capsys):
    wd, _ = trained
    assert main(["--workdir", str(wd), "evaluate", "--split", "test"]) == 0
    captured = capsys.readouterr()
    assert captured.out.strip().endswith("report.json")
    report = json.loads((wd / "report.json").read_text())
    assert "accuracy" in report["binary"]


def test_json_log_mode(tmp_path, capsys):
    assert main(["--json", "--workdir", str(tmp_path), "predict"]) == 1
    line = capsys.readouterr().err.strip().splitlines()[-1]
    event = json.loads(line)
    assert event["event"] == "error"
    assert event["kind"] == "validation"


def test_workdir_env_var(small_corpus, tmp_path, monkeypatch, capsys):
    root, _ = small_corpus
    monkeypatch.setenv("STREAMGATE_WORKDIR", str(tmp_path / "from_env"))
    assert main(["ingest", "--input", str(root)]) == 0
    capsys.readouterr()
    assert (tmp_path / "from_env" / "catalog.jsonl").exists()
