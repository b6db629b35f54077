import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dpseg.errors import InvalidConfigError, InvalidInputError, InvalidLabelError, DimensionError
from dpseg.harness.ablation import AXES, run_ablation
from dpseg.harness.config import TrainConfig, load_config
from dpseg.harness.encoders import ToyEncoder, VisualPromptEncoder, toy_image_encoder
from dpseg.harness.metrics import compute_miou, confusion_matrix
from dpseg.harness.model import DPSegNet, PromptTensors
from dpseg.harness.prompts import build_prompt_set
from dpseg.harness.scenes import SMALL_AREA_FRACTION, generate_prompt_image, generate_scene
from dpseg.harness.training import (evaluate_result, load_checkpoint, make_scenes, run_training,
                                    save_checkpoint, save_loss_curve)
from oracles import iou_loop

TINY = TrainConfig(steps=3, train_scenes=4, eval_scenes=2, hidden_dims=(8, 8, 8), d_F=8)


# scenes ---------------------------------------------------------------------

def test_scene_determinism_and_invariants():
    a, b = generate_scene(7, 5), generate_scene(7, 5)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)
    assert a.image.shape == (64, 64, 3) and a.image.dtype == np.float32
    assert 0 <= a.image.min() and a.image.max() <= 1
    assert a.labels.min() >= 0 and a.labels.max() < 5


def test_no_shapes_is_all_background():
    s = generate_scene(0, 4, shapes_per_scene=(0, 0))
    assert not s.labels.any() and s.meta == []


def test_small_object_present():
    for seed in range(20):
        s = generate_scene(seed, 4)
        small = [m for m in s.meta if m["small"]]
        assert len(small) == 1
        assert small[0]["area"] < SMALL_AREA_FRACTION * 64 * 64


def test_class_balance_over_seed_sweep():
    K = 6
    counts = np.zeros(K, int)
    for seed in range(100):
        counts += np.bincount(np.unique(generate_scene(seed, K).labels), minlength=K) > 0
    assert counts.min() >= 5


@pytest.mark.parametrize("kw", [dict(K=1), dict(grid=(48, 64)), dict(shapes_per_scene=(3, 1))])
def test_scene_config_errors(kw):
    args = dict(seed=0, K=4)
    args.update(kw)
    with pytest.raises(InvalidConfigError):
        generate_scene(**args)


def test_prompt_images():
    bg = generate_prompt_image(0, 0, 4)
    obj = generate_prompt_image(2, 1, 4)
    assert bg.shape == obj.shape == (64, 64, 3)
    assert (bg.sum(-1) > 0.2).mean() > 0.9                 # background fills the canvas
    assert (obj.sum(-1) < 0.2).mean() > 0.2                 # object sits on black
    assert np.array_equal(obj, generate_prompt_image(2, 1, 4))


# encoders -------------------------------------------------------------------

def test_encoder_pyramid_shapes():
    enc = ToyEncoder()
    pyr = toy_image_encoder(np.zeros((64, 64, 3), np.float32), enc)
    assert [tuple(pyr.Ej[j].shape) for j in (2, 3, 4, 5)] == [(16, 16, 16), (8, 8, 32), (4, 4, 64), (2, 2, 128)]
    assert tuple(pyr.E.shape) == (2, 2, 64)


def test_zero_image_gives_zero_features():
    pyr = toy_image_encoder(np.zeros((32, 32, 3), np.float32), ToyEncoder())
    assert all(torch.count_nonzero(pyr.Ej[j]) == 0 for j in (2, 3, 4, 5))
    assert torch.count_nonzero(pyr.E) == 0


def test_indivisible_input():
    with pytest.raises(InvalidInputError):
        toy_image_encoder(np.zeros((48, 64, 3), np.float32), ToyEncoder())


def test_encoder_gradients_vs_finite_differences():
    from dpseg.decoder import grad_check
    torch.manual_seed(0)
    enc = ToyEncoder(dims=(2, 2, 2, 2), d_z=2).double()
    x = torch.rand(1, 32, 32, 3, dtype=torch.float64)
    rep = grad_check(lambda: (enc(x).E ** 2).sum() + enc(x).Ej[3].sum(), dict(enc.named_parameters()))
    assert rep.ok, rep.per_param


def test_visual_prompt_encoder_is_frozen_and_deterministic():
    enc = ToyEncoder()
    vpe = VisualPromptEncoder(enc)
    assert not any(p.requires_grad for p in enc.parameters())
    img = generate_prompt_image(1, 0, 4)
    a, b = vpe(img), vpe(img)
    assert np.array_equal(a[0], b[0])
    assert a[0].shape == (64,) and a[1][2].shape == (16, 16, 16)


def test_constant_prompt_gives_constant_maps():
    v, maps = VisualPromptEncoder(ToyEncoder())(np.full((64, 64, 3), 0.4, np.float32))
    for j in (2, 3, 4):
        assert np.ptp(maps[j], axis=(0, 1)).max() == 0


def test_prompt_on_class_crop_matches_object_pixels(trained_small):
    r = trained_small
    scene = make_scenes(r.config, 1, 1)[0]
    k = next(m["class"] for m in scene.meta if not m["small"])
    ys, xs = np.nonzero(scene.labels == k)
    crop = np.where((scene.labels == k)[..., None], scene.image, 0)
    crop = crop[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    from dpseg.refinement import resample
    side = max(crop.shape[:2])
    sq = np.zeros((side, side, 3), np.float32)
    sq[:crop.shape[0], :crop.shape[1]] = crop
    v, _ = r.prompt_encoder(resample(sq, 64))
    E = toy_image_encoder(scene.image, r.model.image_encoder).E.detach().numpy()
    lab5 = scene.labels[16::32, 16::32]
    cos = E @ v / (np.linalg.norm(E, axis=-1) * np.linalg.norm(v))
    if (lab5 == k).any() and (lab5 == 0).any():
        assert cos[lab5 == k].mean() > cos[lab5 == 0].mean()
    Ej2 = toy_image_encoder(scene.image, r.model.image_encoder).Ej[2].detach().numpy()
    _, maps = r.prompt_encoder(resample(sq, 64))
    pooled = maps[2].mean((0, 1))
    c2 = Ej2 @ pooled / (np.linalg.norm(Ej2, axis=-1) * np.linalg.norm(pooled) + 1e-12)
    lab2 = scene.labels[2::4, 2::4]
    assert c2[lab2 == k].mean() > c2[lab2 == 0].mean()


# metrics --------------------------------------------------------------------

def test_miou_hand_example():
    rep = compute_miou(np.zeros((2, 2), int), np.array([[0, 0], [1, 1]]), 2)
    assert rep.per_class_iou.tolist() == [0.5, 0.0]
    assert rep.miou == 0.25


def test_miou_perfect():
    gt = generate_scene(0, 4).labels
    assert compute_miou(gt, gt, 4).miou == 1.0


def test_class_only_in_prediction_is_excluded_from_mean():
    gt = np.zeros((2, 2), int)
    pred = np.array([[0, 0], [0, 2]])
    rep = compute_miou(pred, gt, 3)
    assert rep.per_class_iou[2] == 0.0
    assert np.isnan(rep.per_class_iou[1])
    assert rep.miou == 0.75


def test_miou_errors():
    with pytest.raises(DimensionError):
        compute_miou(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(InvalidLabelError):
        compute_miou(np.full((2, 2), 2), np.zeros((2, 2), int), 2)


def test_confusion_rows_are_ground_truth():
    c = confusion_matrix(np.array([1, 1]), np.array([0, 1]), 2)
    assert c.tolist() == [[0, 1], [0, 1]]


_maps = st.integers(0, 2**31 - 1)


@settings(max_examples=40, deadline=None)
@given(_maps)
def test_miou_matches_loop_and_relabeling(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 6))
    pred = rng.integers(0, K, (5, 6))
    gt = rng.integers(0, K, (5, 6))
    rep = compute_miou(pred, gt, K)
    ref = np.array(iou_loop(pred, gt, K))
    np.testing.assert_allclose(rep.per_class_iou, ref, equal_nan=True)
    perm = rng.permutation(K)
    rep_p = compute_miou(perm[pred], perm[gt], K)
    np.testing.assert_allclose(rep_p.per_class_iou[perm], rep.per_class_iou, equal_nan=True)
    assert rep_p.miou == pytest.approx(rep.miou)
    assert compute_miou(pred, pred, K).miou == 1.0


# config ---------------------------------------------------------------------

def test_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# toy run\nsteps = 12\nlr = 0.01  # faster\nhidden_dims = 8, 8, 8\nfusion = avg-cos\nK = 3\nd_F = 16\n")
    cfg = load_config(p, seed=3)
    assert (cfg.steps, cfg.lr, cfg.hidden_dims, cfg.fusion, cfg.seed) == (12, 0.01, (8, 8, 8), "avg-cos", 3)
    assert (cfg.K, cfg.d_F) == (3, 16)
    assert cfg.fingerprint() != TrainConfig().fingerprint()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("text", ["bogus = 1\n", "steps = many\n", "K = 1\n", "image_size = 50\n"])
def test_bad_config_file(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    with pytest.raises(InvalidConfigError):
        load_config(p)


def test_fingerprint_is_stable():
    assert TrainConfig().fingerprint() == TrainConfig().fingerprint()
    assert len(TrainConfig().fingerprint()) == 12


# model / training -----------------------------------------------------------

def test_model_forward_shapes_for_every_mode():
    enc = ToyEncoder()
    p = PromptTensors.from_embeddings(build_prompt_set(VisualPromptEncoder(enc), 3, 2))
    images = torch.rand(2, 64, 64, 3)
    for mode, fusion, guidance in [("dual", "dual-embed", "visual"), ("dual", "concat-cos", "upsampled"),
                                   ("text", "dual-embed", "none"), ("visual", "avg-cos", "visual")]:
        torch.manual_seed(0)
        net = DPSegNet(M=2, hidden_dims=(8, 8, 8), d_F=8, prompt_mode=mode, fusion=fusion, guidance=guidance)
        assert net(images, p).shape == (2, 64, 64, 3)


def test_prompt_set_text_tracks_visual_scale():
    p = build_prompt_set(VisualPromptEncoder(ToyEncoder()), 3, 2)
    assert p.T.shape == p.V.shape == (3, 2, 64)
    assert np.linalg.norm(p.T, axis=-1).mean() == pytest.approx(np.linalg.norm(p.V, axis=-1).mean(), rel=1e-5)


def test_zero_steps_checkpoint_equals_initialisation(tmp_path):
    from dpseg.harness.training import build_model
    r = run_training(TINY.with_(steps=0))
    init = build_model(TINY.with_(steps=0)).state_dict()
    for k, v in r.model.state_dict().items():
        assert torch.equal(v, init[k])


def test_training_is_bitwise_reproducible():
    a, b = run_training(TINY), run_training(TINY)
    assert a.losses == b.losses
    for (k, v), (_, w) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(v, w), k
    c = run_training(TINY.with_(seed=1))
    assert c.losses != a.losses


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    r = run_training(TINY)
    save_checkpoint(r, tmp_path / "m.dpec")
    back = load_checkpoint(tmp_path / "m.dpec")
    assert back.config == r.config
    for k, v in r.model.state_dict().items():
        assert v.numpy().tobytes() == back.model.state_dict()[k].numpy().tobytes()
    assert back.prompts.equals(r.prompts)
    scenes = make_scenes(r.config, 1, 2)
    assert evaluate_result(back, scenes).miou == evaluate_result(r, scenes).miou


def test_loss_curve_csv(tmp_path):
    save_loss_curve([0.5, 0.25], tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines() == ["step,loss", "0,0.5", "1,0.25"]


def test_ablation_arms_share_data(tmp_path):
    res = run_ablation(TINY.with_(steps=1), "templates", seeds=(0, 1))
    assert [s.arm for s in res.summary] == [a for a, _ in AXES["templates"]]
    for seed in (0, 1):
        fps = {r["data_fingerprint"] for r in res.rows if r["seed"] == seed}
        assert len(fps) == 1
    res.write_csv(tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().startswith("axis,arm,miou_mean,miou_stdev,n_seeds")
    with pytest.raises(InvalidConfigError):
        run_ablation(TINY, "depth")
