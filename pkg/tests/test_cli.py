import json
import os

import pytest
import torch

from detadvprop.cli import main
from detadvprop.evaluation import EvalReport

SMALL_MODEL = ["--set", "model.widths=(8,8,16,16)", "--set", "model.head_width=8", "--set", "model.head_depth=1"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run, grid = str(root / "data"), str(root / "run"), str(root / "grid")
    assert main(["gen-data", "--n", "12", "--seed", "1", "--val-fraction", "0.25", "--out", data]) == 0
    assert main(["train", "--data", data, "--out", run, "--variant", "det_advprop", "--epochs", "1",
                 "--batch-size", "4", "--quiet"] + SMALL_MODEL) == 0
    assert main(["corrupt", "--data", data, "--kinds", "gaussian_noise,brightness", "--severities", "1,5",
                 "--out", grid]) == 0
    report = str(root / "reports" / "det.json")
    assert main(["eval", "--ckpt", os.path.join(run, "final"), "--data", data, "--grid", grid,
                 "--out", report]) == 0
    return root, data, run, grid, report


def test_pipeline_outputs(pipeline):
    root, data, run, grid, report = pipeline
    manifest = json.load(open(os.path.join(data, "manifest.json")))
    assert manifest["command"] == "gen-data" and manifest["seeds"] == {"root": 1}
    train_manifest = json.load(open(os.path.join(run, "manifest.json")))
    assert train_manifest["config"]["train.variant"] == "det_advprop"
    assert train_manifest["config"]["model.bn_branches"] == 2
    assert all(os.path.exists(p) for p in train_manifest["paths"].values())
    assert len(json.load(open(os.path.join(grid, "manifest.json")))["variants"]) == 4
    r = EvalReport.load(report)
    assert len(r.per_variant_map) == 4 and r.mean_corrupted_map is not None
    eval_manifest = json.load(open(report + ".manifest.json"))
    assert eval_manifest["paths"]["report"] == os.path.abspath(report)


def test_eval_to_stdout(pipeline, capsys):
    _, data, run, _, report = pipeline
    assert main(["eval", "--ckpt", os.path.join(run, "final"), "--data", data]) == 0
    printed = EvalReport.from_json(capsys.readouterr().out)
    assert printed.map == EvalReport.load(report).map


def test_report_command(pipeline, tmp_path, capsys):
    _, _, _, _, report = pipeline
    out = tmp_path / "table.json"
    assert main(["report", report, report, "--names", "a,b", "--json", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].split()[0] == "model" and "(+0.0)" in text
    assert json.loads(out.read_text())["baseline"] == "a"
    assert main(["report", report, "--names", "a,b"]) == 1


def test_attack_dump(pipeline, tmp_path):
    _, data, run, _, _ = pipeline
    out = str(tmp_path / "adv")
    assert main(["attack-dump", "--ckpt", os.path.join(run, "last"), "--data", data, "--n", "2",
                 "--set", "attack.epsilon=4", "--out", out]) == 0
    manifest = json.load(open(os.path.join(out, "manifest.json")))
    assert len(manifest["images"]) == 2
    assert manifest["config"]["branch"] == 1
    for entry in manifest["images"]:
        assert entry["source_tag"] in ("cls", "loc")
        assert entry["linf"] <= 2 * 4 / 255 + 1e-6
        assert os.path.exists(os.path.join(out, entry["file"]))
    assert main(["attack-dump", "--ckpt", os.path.join(run, "last"), "--data", data,
                 "--set", "train.epochs=3", "--out", str(tmp_path / "x")]) == 1


def test_invalid_variant_exits_1_without_output(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(tmp_path), "--out", str(out), "--variant", "bogus"]) == 1
    assert not out.exists()
    assert "invalid choice" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--frobnicate"]) == 1
    assert main([]) == 1
    assert main(["--version"]) == 0
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--set", "shape=blob"]) == 1
    assert main(["corrupt", "--data", str(tmp_path), "--kinds", "fog", "--out", str(tmp_path / "g")]) == 1
    assert not (tmp_path / "g").exists()


def test_config_errors_exit_1(pipeline, tmp_path):
    _, data, _, _, _ = pipeline
    assert main(["train", "--data", data, "--out", str(tmp_path / "r"), "--set", "train.nonsense=1"]) == 1
    assert main(["train", "--data", data, "--out", str(tmp_path / "r"), "--set", "attack.epsilon=-1"]) == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing"), "--data", str(tmp_path)]) == 2
    assert "FileNotFoundError" in capsys.readouterr().err


def test_existing_output_is_protected(pipeline):
    _, data, _, _, _ = pipeline
    assert main(["gen-data", "--n", "2", "--out", data]) == 2


def test_thread_count_from_environment(pipeline, monkeypatch, capsys):
    _, data, run, _, _ = pipeline
    before = torch.get_num_threads()
    try:
        monkeypatch.setenv("DET_ADVPROP_THREADS", "1")
        assert main(["eval", "--ckpt", os.path.join(run, "final"), "--data", data]) == 0
        assert torch.get_num_threads() == 1
        monkeypatch.setenv("DET_ADVPROP_THREADS", "zero")
        assert main(["eval", "--ckpt", os.path.join(run, "final"), "--data", data]) == 1
    finally:
        torch.set_num_threads(before)
