import json

import pytest

from rha.cli import main
from rha.model import module_of, param_shapes, profile


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, json.loads(capsys.readouterr().out)


def test_relate_tables(tmp_path, capsys):
    (tmp_path / "one.json").write_text(json.dumps([[0, 0, 10, 10]]))
    code, doc = run(capsys, "relate", "--boxes", tmp_path / "one.json")
    assert code == 0 and doc["relations"] == []

    (tmp_path / "nest.json").write_text(json.dumps({"frame_size": [100, 100], "boxes": [[0, 0, 50, 50], [10, 10, 20, 20]]}))
    code, doc = run(capsys, "relate", "--boxes", tmp_path / "nest.json")
    assert code == 0
    assert {(r["i"], r["j"]): r["class"] for r in doc["relations"]} == {(0, 1): 2, (1, 0): 1}


def test_bad_input_exits_one(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps([[5, 5, 1, 1]]))
    code, doc = run(capsys, "relate", "--boxes", tmp_path / "bad.json")
    assert code == 1 and "error" in doc


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    assert main(["synth", "--out", str(root / "ds"), "--num", "4", "--frames", "4", "--objects", "3",
                 "--hyp-len", "4", "--sub-len", "3"]) == 0
    (root / "cfg.json").write_text(json.dumps({"data": "ds/manifest.json", "epochs": 3, "batch_size": 1,
                                               "out_dir": str(root / "run")}))
    assert main(["train", "--config", str(root / "cfg.json")]) == 0
    return root


def test_train_writes_artifacts(trained):
    run_dir = trained / "run"
    assert {p.name for p in run_dir.iterdir()} >= {"checkpoint.json", "losses.csv", "losses.png"}
    rows = (run_dir / "losses.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,lr,total") and len(rows) == 4


def test_eval_reports_metrics_and_figures(trained, capsys):
    report = trained / "report"
    code, doc = run(capsys, "eval", "--ckpt", trained / "run/checkpoint.json",
                    "--data", trained / "ds/manifest.json", "--report-dir", report)
    assert code == 0
    assert set(doc["metrics"]) == {"accuracy", "temp_miou", "asa"}
    assert len(doc["predictions"]) == 4
    assert (report / "spans.png").stat().st_size > 0
    lines = (report / "predictions.csv").read_text().splitlines()
    assert len(lines) == 5
    hits = sum(int(l.split(",")[1]) == int(l.split(",")[2]) for l in lines[1:])
    assert hits / 4 == doc["metrics"]["accuracy"]


def test_eval_is_deterministic(trained, capsys):
    args = ("eval", "--ckpt", trained / "run/checkpoint.json", "--data", trained / "ds/manifest.json")
    assert run(capsys, *args) == run(capsys, *args)


def test_eval_rejects_dim_mismatch(trained, tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "full"), "--num", "1", "--dims", "full",
                 "--frames", "2", "--objects", "2"]) == 0
    capsys.readouterr()
    code, doc = run(capsys, "eval", "--ckpt", trained / "run/checkpoint.json", "--data", tmp_path / "full/manifest.json")
    assert code == 1 and "dimension mismatch" in doc["error"]


def test_gradcheck_rejects_other_profiles(capsys):
    code, doc = run(capsys, "gradcheck", "--dims", "full")
    assert code == 1 and "reduced" in doc["error"]


def test_gradcheck_lists_every_group_once(capsys):
    code, doc = run(capsys, "gradcheck", "--seed", "0")
    assert code == 0 and doc["passed"]
    assert sorted(doc["groups"]) == sorted(param_shapes(profile("reduced")))
    assert set(doc["modules"]) == {module_of(k) for k in doc["groups"]}
    assert doc["max_relative_error"] == max(doc["groups"].values()) < 1e-4
