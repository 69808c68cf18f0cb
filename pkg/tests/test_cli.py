import json
import os

import numpy as np
import pytest

from octvf.cli import main, read_predictions, write_predictions

SMALL = {
    "synth": {"ring_width": 48, "ring_height": 32, "slo_size": 32},
    "train": {"steps_per_epoch": 3, "max_epochs": 2},
    "model": {"preset": "tiny"},
    "eval": {"bootstrap_iterations": 50},
}


def run(*argv):
    return main([str(a) for a in argv])


def read(path):
    with open(path, "rb") as f:
        return f.read()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(SMALL))
    c = ["--config", cfg]
    assert run("synth-gen", *c, "--seed", 4, "--patients", 12, "--out", root / "data") == 0
    container = root / "data" / "exams.octvf"
    assert run("split", *c, "--seed", 7, "--container", container, "--out", root / "split") == 0
    assert run("train", *c, "--seed", 1, "--container", container, "--split-dir", root / "split",
               "--no-figures", "--out", root / "train") == 0
    ck = root / "train" / "checkpoint.ckpt"
    ids = root / "split" / "test.ids"
    assert run("predict", *c, "--checkpoint", ck, "--container", container, "--ids", ids,
               "--out", root / "pred") == 0
    return root, cfg, container, ck, ids


def test_outputs_present(pipeline):
    root = pipeline[0]
    for rel in ("data/exams.octvf", "data/truth.csv", "data/synth_config.json", "split/train.ids",
                "split/val.ids", "split/test.ids", "split/split.json", "train/checkpoint.ckpt",
                "train/training_log.csv", "pred/predictions.csv"):
        assert (root / rel).is_file(), rel


def test_gradcheck_passes(tmp_path, capsys):
    assert run("gradcheck", "--out", tmp_path) == 0
    assert "PASS" in capsys.readouterr().out


def test_split_is_reproducible(pipeline, tmp_path):
    root, cfg, container, *_ = pipeline
    assert run("split", "--config", cfg, "--seed", 7, "--container", container, "--out", tmp_path) == 0
    for name in ("train.ids", "val.ids", "test.ids"):
        assert read(tmp_path / name) == read(root / "split" / name)


def test_eval_report_and_idempotence(pipeline, tmp_path):
    root, cfg, container, _, ids = pipeline
    before = read(container)
    pred = root / "pred" / "predictions.csv"
    for out in ("a", "b"):
        assert run("eval", "--config", cfg, "--container", container, "--ids", ids,
                   "--predictions", pred, "--no-figures", "--out", tmp_path / out) == 0
    for name in ("metrics.csv", "sectors.csv", "summary.md", "pointwise_map.svg", "binned_whiskers.svg",
                 "evaluation.json"):
        assert read(tmp_path / "a" / name) == read(tmp_path / "b" / name), name
    assert read(container) == before
    assert run("report", "--evaluation", tmp_path / "a" / "evaluation.json", "--no-figures",
               "--out", tmp_path / "r") == 0
    assert read(tmp_path / "r" / "metrics.csv") == read(tmp_path / "a" / "metrics.csv")


def test_eval_count_mismatch(pipeline, tmp_path, capsys):
    root, cfg, container, _, ids = pipeline
    eids, preds, target = read_predictions(root / "pred" / "predictions.csv")
    short = tmp_path / "short.csv"
    write_predictions(short, eids[:-1], preds[:-1], target)
    rc = run("eval", "--config", cfg, "--container", container, "--ids", ids, "--predictions", short,
             "--no-figures", "--out", tmp_path / "e")
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rc == 1
    assert f"{len(eids) - 1} predictions" in err["message"] and f"{len(eids)} exams" in err["message"]


def test_ensemble_of_identical_files(pipeline, tmp_path):
    pred = pipeline[0] / "pred" / "predictions.csv"
    assert run("ensemble", "--predictions", pred, pred, pred, "--out", tmp_path) == 0
    a, pa, _ = read_predictions(pred)
    b, pb, _ = read_predictions(tmp_path / "predictions.csv")
    assert a == b
    np.testing.assert_array_equal(pa, pb)


def test_config_errors_listed_together(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({
        "split": {"ratios": [0.5, 0.5, 0.5]},
        "train": {"plateau_factor": 2.0},
        "eval": {"ci_level": 1.5, "sector_map": "/nonexistent.csv"},
    }))
    rc = run("split", "--config", bad, "--container", tmp_path / "missing.octvf", "--out", tmp_path / "o")
    err = json.loads(capsys.readouterr().err)
    assert rc == 2 and err["error"] == "config"
    text = " ".join(err["details"])
    for needle in ("split.ratios", "plateau_factor", "ci_level", "sector_map", "--container"):
        assert needle in text
    assert not os.path.exists(tmp_path / "o")


def test_predictions_round_trip(tmp_path, rng):
    p = rng.normal(size=(3, 52))
    write_predictions(tmp_path / "p.csv", ["a", "b", "c"], p, "thresholds")
    ids, back, target = read_predictions(tmp_path / "p.csv")
    assert ids == ["a", "b", "c"] and target == "thresholds"
    np.testing.assert_array_equal(back, p)
    header = (tmp_path / "p.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["exam_id", "target", "c01"] and header[-1] == "c52"
