from __future__ import annotations

import json
import shutil
import subprocess

import pytest

from editlab.cli import main
from editlab.datasets import load_dataset


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.jsonl"
    code = main(["gen-dataset", "--name", "tiny", "--out", str(path), "--n-edits", "4",
                 "--n-preservation", "24", "--n-background", "72"])
    assert code == 0
    return path


def test_gen_dataset_writes_a_loadable_file(tiny_dataset):
    ds = load_dataset(tiny_dataset)
    assert ds.name == "tiny"
    assert len(ds.edit_items) == 4 and len(ds.preservation_queries) == 24


def test_sweep_writes_csv_and_json(tiny_dataset, tmp_path, capsys):
    code = main(["sweep", "--dataset", str(tiny_dataset), "--lambda-grid", "150,15000",
                 "--output-dir", str(tmp_path), "--name", "t"])
    assert code == 0
    csv_text = (tmp_path / "t.csv").read_text()
    assert capsys.readouterr().out == csv_text
    lines = csv_text.splitlines()
    assert lines[0].startswith("row,lambda,norm_L3,norm_L4,norm_L5,S-acc")
    assert [l.split(",")[0] for l in lines[1:4]] == ["pre-edit", "lambda=150", "lambda=15000"]
    d = json.loads((tmp_path / "t.json").read_text())
    assert d["config"]["lambda_grid"] == [150.0, 15000.0]


def test_sweep_honours_config_file_and_overrides(tiny_dataset, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lambda_grid": [1e3], "topk": [1, 2], "dataset": str(tiny_dataset)}))
    assert main(["sweep", "--config", str(cfg), "--layers", "4,5", "--output-dir", str(tmp_path)]) == 0
    header = (tmp_path / "sweep.csv").read_text().splitlines()[0].split(",")
    assert header[2:4] == ["norm_L4", "norm_L5"]
    assert "Top-2" in header


def test_edit_then_evaluate(tiny_dataset, tmp_path, capsys):
    pre = tmp_path / "pre.json"
    post = tmp_path / "post.json"
    assert main(["gen-model", "--out", str(pre)]) == 0
    assert main(["edit", "--model", str(pre), "--dataset", str(tiny_dataset), "--lam", "150", "--out", str(post)]) == 0
    sol = json.loads(capsys.readouterr().out)
    assert sol["layers"] == [3, 4, 5]
    assert main(["evaluate", "--pre", str(pre), "--post", str(pre), "--dataset", str(tiny_dataset)]) == 0
    same = json.loads(capsys.readouterr().out)
    assert same["kl_mean"] == 0.0 and same["topk_overlap"]["1"] == 100.0
    assert main(["evaluate", "--pre", str(pre), "--post", str(post), "--dataset", str(tiny_dataset)]) == 0
    assert json.loads(capsys.readouterr().out)["kl_mean"] > 0


def test_split_on_inconsistency_fixture(capsys):
    assert main(["split", "--dataset", "toy-inconsistency"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n_consistent"] == 12 and out["n_inconsistent"] == 24


def test_user_errors_exit_with_code_2(tmp_path, capsys):
    assert main(["sweep", "--dataset", str(tmp_path / "missing.jsonl")]) == 2
    assert "error" in capsys.readouterr().err.lower()
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["sweep", "--config", str(bad)]) == 2
    assert main(["sweep", "--lambda-grid", "10,1"]) == 2


def test_failed_rows_exit_with_code_1(tiny_dataset, tmp_path, monkeypatch):
    from editlab import harness
    from editlab.errors import NumericalError

    def boom(*a, **kw):
        raise NumericalError("synthetic")

    monkeypatch.setattr(harness, "multi_layer_edit", boom)
    code = main(["sweep", "--dataset", str(tiny_dataset), "--lambda-grid", "150", "--output-dir", str(tmp_path)])
    assert code == 1
    assert "ERROR" in (tmp_path / "sweep.csv").read_text()


@pytest.mark.skipif(shutil.which("editlab") is None, reason="console script not installed")
def test_console_script_help():
    out = subprocess.run(["editlab", "--help"], capture_output=True, text=True, check=True).stdout
    for cmd in ("gen-model", "gen-dataset", "edit", "evaluate", "sweep", "split"):
        assert cmd in out
