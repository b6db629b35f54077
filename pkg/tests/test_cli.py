import json

import numpy as np
import pytest

from dpseg.cli import main
from dpseg.container import save_container
from dpseg.errors import DivergenceError

TINY_CFG = "steps = 4\ntrain_scenes = 4\neval_scenes = 2\nhidden_dims = 8, 8, 8\nd_F = 8\n"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY_CFG)
    assert main(["train", "--config", str(d / "tiny.cfg"), "--seed", "1", "--out", str(d / "run")]) == 0
    assert main(["gen-data", "--seed", "3", "--count", "3", "--out", str(d / "data.dpec")]) == 0
    return d


def test_train_outputs(trained, capsys):
    run = trained / "run"
    for name in ("checkpoint.dpec", "loss_curve.csv", "loss_curve.png", "train_report.json"):
        assert (run / name).exists(), name
    rep = json.loads((run / "train_report.json").read_text())
    assert rep["config"]["seed"] == 1 and rep["config"]["steps"] == 4
    assert len(rep["config_fingerprint"]) == 12
    assert rep["eval"]["miou_policy"]


def test_infer(trained, tmp_path):
    out = tmp_path / "inf"
    assert main(["infer", "--ckpt", str(trained / "run/checkpoint.dpec"),
                 "--image", str(trained / "data.dpec"), "--index", "1", "--out", str(out)]) == 0
    labels = np.loadtxt(out / "labels.csv", delimiter=",")
    assert labels.shape == (64, 64)
    assert (out / "labels.png").exists()
    assert "scores" in json.loads((out / "infer_report.json").read_text())


def test_infer_from_png(trained, tmp_path):
    from PIL import Image
    Image.fromarray(np.full((64, 64, 3), 120, np.uint8)).save(tmp_path / "x.png")
    assert main(["infer", "--ckpt", str(trained / "run/checkpoint.dpec"),
                 "--image", str(tmp_path / "x.png"), "--out", str(tmp_path / "o")]) == 0


def test_refine_infer(trained, tmp_path):
    out = tmp_path / "ref"
    assert main(["refine-infer", "--ckpt", str(trained / "run/checkpoint.dpec"),
                 "--image", str(trained / "data.dpec"), "--out", str(out), "--per-component"]) == 0
    rep = json.loads((out / "refine_report.json").read_text())
    assert {"miou_pass1", "miou_pass2", "iou_delta", "provenance"} <= set(rep)
    assert (out / "refine.png").exists()


def test_eval(trained, tmp_path, capsys):
    out = tmp_path / "ev"
    assert main(["eval", "--ckpt", str(trained / "run/checkpoint.dpec"),
                 "--dataset", str(trained / "data.dpec"), "--out", str(out)]) == 0
    rep = json.loads((out / "eval_report.json").read_text())
    assert 0 <= rep["miou"] <= 1
    assert "mIoU" in capsys.readouterr().out


def test_ablate(trained, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--axis", "templates", "--seeds", "1", "--steps", "1",
                 "--config", str(trained / "tiny.cfg"), "--out", str(out)]) == 0
    for name in ("ablation_templates.csv", "ablation_templates_runs.csv", "ablation_templates.png"):
        assert (out / name).exists()


def test_ablate_bad_axis():
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--axis", "nope"])
    assert exc.value.code == 2


def test_analyze_gap_synthetic(tmp_path, capsys):
    assert main(["analyze-gap", "--synthetic", "50", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "gap_report.csv").exists() and (tmp_path / "gap_report.png").exists()
    assert "win-rate" in capsys.readouterr().out


def test_analyze_gap_cached(tmp_path):
    rng = np.random.default_rng(0)
    E, T, V = rng.standard_normal((3, 10, 8))
    save_container({"E": E, "T": T, "V": V}, tmp_path / "s.dpec")
    assert main(["analyze-gap", "--samples", str(tmp_path / "s.dpec"), "--out", str(tmp_path / "a")]) == 0
    for n, a in (("e", E), ("t", T), ("v", V)):
        save_container({"x": a}, tmp_path / f"{n}.dpec")
    assert main(["analyze-gap", "--image", str(tmp_path / "e.dpec"), "--text", str(tmp_path / "t.dpec"),
                 "--visual", str(tmp_path / "v.dpec"), "--out", str(tmp_path / "b")]) == 0
    rows = (tmp_path / "b" / "gap_report.csv").read_text().splitlines()
    assert len(rows) == 11


def test_analyze_gap_needs_input(tmp_path):
    assert main(["analyze-gap", "--out", str(tmp_path)]) == 2


def test_heatmap(tmp_path):
    rng = np.random.default_rng(0)
    save_container({"features": rng.standard_normal((4, 5, 6)), "T": rng.standard_normal((2, 3, 6)),
                    "V": rng.standard_normal((2, 3, 6))}, tmp_path / "h.dpec")
    (tmp_path / "cats.txt").write_text("sky\nroad\n")
    base = ["heatmap", "--container", str(tmp_path / "h.dpec"), "--categories", str(tmp_path / "cats.txt"),
            "--category", "road"]
    assert main(base + ["--out", str(tmp_path / "road.pgm")]) == 0
    assert (tmp_path / "road.pgm").read_bytes().startswith(b"P5\n5 4\n255\n")
    assert (tmp_path / "road.png").exists()
    assert main(base + ["--format", "csv", "--mode", "text", "--out", str(tmp_path / "road.csv")]) == 0
    assert main(base[:-1] + ["lake", "--out", str(tmp_path / "x.pgm")]) == 2


def test_gen_data(tmp_path):
    from dpseg.container import load_container
    assert main(["gen-data", "--seed", "0", "--count", "2", "--K", "3", "--out", str(tmp_path / "d.dpec")]) == 0
    arrays = load_container(tmp_path / "d.dpec")
    assert arrays["images"].shape == (2, 64, 64, 3)
    assert arrays["labels"].max() < 3


def test_invalid_config_exit_code(tmp_path):
    (tmp_path / "bad.cfg").write_text("K = 1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad2.cfg").write_text("colour = blue\n")
    assert main(["train", "--config", str(tmp_path / "bad2.cfg"), "--out", str(tmp_path)]) == 2


def test_missing_or_corrupt_files(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "none.dpec"), "--dataset", "x"]) == 2
    (tmp_path / "junk.dpec").write_bytes(b"garbage")
    assert main(["infer", "--ckpt", str(tmp_path / "junk.dpec"), "--image", "x"]) == 2


def test_divergence_exit_code(tmp_path, monkeypatch):
    import dpseg.harness.training as training

    def diverge(cfg, progress=None):
        raise DivergenceError("non-finite loss at step 5", step=5)

    monkeypatch.setattr(training, "run_training", diverge)
    (tmp_path / "tiny.cfg").write_text(TINY_CFG)
    assert main(["train", "--config", str(tmp_path / "tiny.cfg"), "--out", str(tmp_path)]) == 3
