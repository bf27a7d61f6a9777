"""End-to-end command-line pipeline on a miniature synthetic dataset."""

import json
import os

import numpy as np
import pytest

from poredetect.cli import main
from poredetect.porenet import load_checkpoint

SMALL_SYNTH = {"height": 64, "width": 64, "n_pores": 6, "margin": 13,
               "min_separation": 9.0}


def _config(tmp_path, extra=None):
    cfg = {"synth_source": dict(SMALL_SYNTH),
           "synth_target": dict(SMALL_SYNTH, ridge_period=14.0, pore_radius=1.2)}
    cfg.update(extra or {})
    path = str(tmp_path / "config.json")
    with open(path, "w") as f:
        json.dump(cfg, f)
    return path


def _first_json(out: str) -> dict:
    obj, _ = json.JSONDecoder().raw_decode(out[out.index("{"):])
    return obj


def _summary(out_dir) -> dict:
    with open(os.path.join(str(out_dir), "summary.json")) as f:
        return json.load(f)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train once; later tests reuse the artifacts read-only."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = _config(root)
    data = str(root / "data")
    assert main(["synth", "--config", cfg, "--out", data, "--images", "2",
                 "--seed", "3"]) == 0
    run = str(root / "run")
    assert main(["train", "--config", cfg, "--out", run,
                 "--manifest", os.path.join(data, "manifest.json"),
                 "--patch-size", "32", "--patch-step", "32",
                 "--width", "0.125", "--epochs", "1", "--batch-size", "4",
                 "--lr", "1e-3", "--lam", "0.005", "--seed", "3"]) == 0
    return {"root": root, "config": cfg, "data": data, "run": run,
            "manifest": os.path.join(data, "manifest.json"),
            "checkpoint": os.path.join(run, "checkpoint_final.ckpt")}


def test_synth_outputs(pipeline):
    data = pipeline["data"]
    with open(os.path.join(data, "manifest.json")) as f:
        entries = json.load(f)
    assert len(entries) == 4
    assert {e["domain"] for e in entries} == {"source", "target"}
    for e in entries:
        assert os.path.exists(os.path.join(data, e["image"]))
        assert os.path.exists(os.path.join(data, e["pores"]))
    summary = _summary(data)
    assert summary["command"] == "synth" and summary["n_images"] == 4


def test_train_outputs(pipeline):
    run = pipeline["run"]
    summary = _summary(run)
    assert summary["command"] == "train"
    assert summary["n_source_patches"] == 8 and summary["n_target_patches"] == 8
    assert summary["iterations"] == 2      # ceil(8 / 4) * 1 epoch
    assert summary["config"]["train"]["lam"] == 0.005
    ckpt = load_checkpoint(pipeline["checkpoint"])
    assert ckpt.meta.lam == 0.005 and ckpt.meta.seed == 3
    log = open(os.path.join(run, "train_log.csv")).read().strip().split("\n")
    assert log[0].startswith("iter,") and len(log) == 3


def test_detect_writes_map_and_pores(pipeline, tmp_path):
    image = os.path.join(pipeline["data"], "synth-0-000.pgm")
    out = str(tmp_path / "det")
    assert main(["detect", "--checkpoint", pipeline["checkpoint"],
                 "--image", image, "--out", out, "--threshold", "0.3",
                 "--map-format", "pgm"]) == 0
    summary = _summary(out)
    from poredetect.dataprep import load_ground_truth, read_pgm
    pore_map = read_pgm(os.path.join(out, summary["map"]))
    assert pore_map.shape == (64, 64) and pore_map.dtype == np.uint16
    pores = load_ground_truth(os.path.join(out, summary["pores"]), (64, 64))
    assert summary["n_detections"] == len(pores)


def test_eval_reports_rates(pipeline, tmp_path, capsys):
    out = str(tmp_path / "ev")
    assert main(["eval", "--checkpoint", pipeline["checkpoint"],
                 "--manifest", pipeline["manifest"], "--out", out,
                 "--threshold", "0.3", "--domain", "target"]) == 0
    printed = capsys.readouterr().out
    assert "R_T=" in printed and "R_F=" in printed
    with open(os.path.join(out, "report.json")) as f:
        report = json.load(f)
    assert report["true_rate"] == report["recall"]
    assert report["false_rate"] == pytest.approx(1 - report["precision"])
    assert report["n_images"] == 2


def test_roc_sweep_csv(pipeline, tmp_path):
    out = str(tmp_path / "roc")
    assert main(["roc", "--checkpoint", pipeline["checkpoint"],
                 "--manifest", pipeline["manifest"], "--out", out,
                 "--target-false-rate", "0.2"]) == 0
    lines = open(os.path.join(out, "roc.csv")).read().strip().split("\n")
    assert lines[0] == "threshold,true_rate,false_rate,detected,true,false,f_score"
    assert len(lines) == 100
    counts = [int(l.split(",")[3]) for l in lines[1:]]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert "operating_point" in _summary(out)


def test_finetune_from_checkpoint(pipeline, tmp_path):
    out = str(tmp_path / "ft")
    assert main(["finetune", "--checkpoint", pipeline["checkpoint"],
                 "--manifest", pipeline["manifest"], "--out", out,
                 "--epochs", "2", "--patch-step", "32"]) == 0
    summary = _summary(out)
    assert len(summary["epoch_losses"]) == 2
    tuned = load_checkpoint(os.path.join(out, "checkpoint_finetuned.ckpt"))
    base = load_checkpoint(pipeline["checkpoint"])
    np.testing.assert_array_equal(tuned.params["conv1.weight"].values,
                                  base.params["conv1.weight"].values)
    assert not np.array_equal(tuned.params["conv6.weight"].values,
                              base.params["conv6.weight"].values)


def test_flags_override_config(pipeline, tmp_path, capsys):
    cfg = _config(tmp_path, {"train": {"lam": 0.9, "epochs": 1,
                                       "batch_size": 4, "learning_rate": 1e-3}})
    out = str(tmp_path / "run2")
    assert main(["train", "--config", cfg, "--out", out,
                 "--manifest", pipeline["manifest"], "--patch-size", "32",
                 "--patch-step", "32", "--width", "0.125",
                 "--lam", "0.125"]) == 0
    resolved = _first_json(capsys.readouterr().out)
    assert resolved["train"]["lam"] == 0.125       # flag beats config
    assert resolved["train"]["epochs"] == 1        # config beats default
    assert _summary(out)["config"]["train"]["lam"] == 0.125


def test_synth_is_seed_deterministic(tmp_path):
    cfg = _config(tmp_path)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (a, b):
        assert main(["synth", "--config", cfg, "--out", out,
                     "--images", "1", "--seed", "11"]) == 0
    for name in sorted(os.listdir(a)):
        if name == "summary.json":
            continue   # embeds the output path
        with open(os.path.join(a, name), "rb") as fa, \
             open(os.path.join(b, name), "rb") as fb:
            assert fa.read() == fb.read(), name


# ---------------------------------------------------------------------------
# failure modes

def test_unknown_config_section_is_usage_error(tmp_path):
    path = str(tmp_path / "bad.json")
    with open(path, "w") as f:
        json.dump({"sznth_source": {}}, f)
    assert main(["synth", "--config", path, "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key_is_usage_error(tmp_path):
    path = str(tmp_path / "bad.json")
    with open(path, "w") as f:
        json.dump({"synth_source": {"ridge_perood": 9}}, f)
    assert main(["synth", "--config", path, "--out", str(tmp_path / "o")]) == 2


def test_invalid_json_is_usage_error(tmp_path):
    path = str(tmp_path / "bad.json")
    with open(path, "w") as f:
        f.write("{nope")
    assert main(["synth", "--config", path, "--out", str(tmp_path / "o")]) == 2


def test_bad_config_value_is_usage_error(pipeline, tmp_path):
    assert main(["train", "--manifest", pipeline["manifest"],
                 "--out", str(tmp_path / "o"), "--patch-size", "32",
                 "--lam", "-1"]) == 2


def test_bad_thread_count_is_usage_error(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "o"), "--threads", "0"]) == 2


def test_missing_inputs_are_runtime_errors(pipeline, tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "o"), "--patch-size", "32"]) == 1
    assert main(["detect", "--checkpoint", str(tmp_path / "nope.ckpt"),
                 "--image", os.path.join(pipeline["data"], "synth-0-000.pgm"),
                 "--out", str(tmp_path / "o")]) == 1
    assert main(["eval", "--checkpoint", pipeline["checkpoint"],
                 "--manifest", pipeline["manifest"], "--out", str(tmp_path / "o"),
                 "--domain", "source", "--threshold", "2.0"]) == 0  # legal, no dets


def test_detect_section_rejects_unknown_keys(pipeline, tmp_path):
    path = str(tmp_path / "bad.json")
    with open(path, "w") as f:
        json.dump({"detect": {"threshhold": 0.5}}, f)
    assert main(["detect", "--config", path,
                 "--checkpoint", pipeline["checkpoint"],
                 "--image", os.path.join(pipeline["data"], "synth-0-000.pgm"),
                 "--out", str(tmp_path / "o")]) == 2
