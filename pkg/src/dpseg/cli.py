"""``dpseg`` command line.

Exit codes: 0 success, 2 invalid configuration or input, 3 runtime failure
(including training divergence).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .container import load_container, save_container
from .errors import (ContainerCorruptionError, ContainerFormatError, DPSegError, EmptyBankError,
                     InvalidConfigError, InvalidInputError, InvalidLabelError, MalformedTemplateError)

log = logging.getLogger("dpseg")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
_CONFIG_ERRORS = (InvalidConfigError, InvalidInputError, InvalidLabelError, MalformedTemplateError,
                  EmptyBankError, ContainerFormatError, ContainerCorruptionError, FileNotFoundError)


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    print(path)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def _load_cfg(args):
    from .harness.config import TrainConfig, load_config
    overrides = {k: getattr(args, k, None) for k in ("seed", "steps")}
    if getattr(args, "config", None):
        return load_config(args.config, **overrides)
    return TrainConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def _read_image(path, index=0):
    """Image (H, W, 3) in [0, 1] plus ground-truth labels when the file has them."""
    path = Path(path)
    if path.suffix == ".dpec":
        arrays = load_container(path)
        if "images" in arrays:
            labels = arrays["labels"][index].astype(np.int64) if "labels" in arrays else None
            return arrays["images"][index], labels
        if "image" in arrays:
            labels = arrays["labels"].astype(np.int64) if "labels" in arrays else None
            return arrays["image"], labels
        raise InvalidInputError(f"{path}: no 'image' or 'images' array")
    from PIL import Image
    with Image.open(path) as im:
        img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return img, None


def _labels_csv(labels, path):
    np.savetxt(path, labels, fmt="%d", delimiter=",")
    print(path)


def cmd_train(args):
    from .harness.training import evaluate_result, run_training, save_checkpoint, save_loss_curve
    from .plotting import plot_loss_curve
    cfg = _load_cfg(args)
    out = _out_dir(args.out)
    print(f"config fingerprint {cfg.fingerprint()}")

    def progress(step, loss):
        if step % max(1, cfg.steps // 10) == 0:
            log.info("step %d loss %.5f", step, loss)

    result = run_training(cfg, progress=progress)
    save_checkpoint(result, out / "checkpoint.dpec")
    save_loss_curve(result.losses, out / "loss_curve.csv")
    if result.losses:
        plot_loss_curve(result.losses, out / "loss_curve.png")
    report = evaluate_result(result)
    _write_json({"config": cfg.to_dict(), "config_fingerprint": cfg.fingerprint(),
                 "data_fingerprint": result.data_fingerprint,
                 "initial_loss": result.losses[0] if result.losses else None,
                 "final_loss": result.losses[-1] if result.losses else None,
                 "eval": report.to_dict()}, out / "train_report.json")
    return EXIT_OK


def cmd_infer(args):
    from .harness.training import load_checkpoint
    from .plotting import plot_segmentation
    ckpt = load_checkpoint(args.ckpt)
    image, _ = _read_image(args.image, args.index)
    res = ckpt.model.predict(image, ckpt.prompts)
    out = _out_dir(args.out)
    _labels_csv(res.labels, out / "labels.csv")
    plot_segmentation(image, {"prediction": res.labels}, out / "labels.png", ckpt.config.K)
    _write_json({"config_fingerprint": ckpt.config.fingerprint(),
                 "detected": np.flatnonzero(res.detected).tolist(),
                 "scores": res.scores.tolist()}, out / "infer_report.json")
    return EXIT_OK


def cmd_refine_infer(args):
    from .harness.metrics import compute_miou
    from .harness.training import load_checkpoint
    from .plotting import plot_segmentation
    from .refinement import RefinementConfig, semantic_guided_inference
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    image, gt = _read_image(args.image, args.index)
    rcfg = RefinementConfig(detection_threshold=args.threshold, crop_padding=args.padding,
                            prompt_resolution=cfg.prompt_size, per_component=args.per_component)
    out = _out_dir(args.out)
    res = semantic_guided_inference(image, ckpt.prompts, ckpt.model, rcfg, ckpt.prompt_encoder)
    p1, p2 = res["pass1"], res["pass2"]
    _labels_csv(p1.labels, out / "pass1_labels.csv")
    _labels_csv(p2.labels, out / "pass2_labels.csv")
    panels = {"pass 1": p1.labels, "pass 2": p2.labels}
    diff = {"config_fingerprint": cfg.fingerprint(),
            "detected_pass1": np.flatnonzero(p1.scores >= rcfg.detection_threshold).tolist(),
            "detected_pass2": np.flatnonzero(p2.scores >= rcfg.detection_threshold).tolist(),
            "provenance": res["refined"].provenance,
            "changed_pixels": int((p1.labels != p2.labels).sum())}
    if gt is not None:
        r1, r2 = compute_miou(p1.labels, gt, cfg.K), compute_miou(p2.labels, gt, cfg.K)
        diff["miou_pass1"], diff["miou_pass2"] = r1.miou, r2.miou
        diff["iou_delta"] = [None if np.isnan(a) or np.isnan(b) else float(b - a)
                             for a, b in zip(r1.per_class_iou, r2.per_class_iou)]
        panels["ground truth"] = gt
    else:
        diff["iou_delta"] = None
    plot_segmentation(image, panels, out / "refine.png", cfg.K)
    _write_json(diff, out / "refine_report.json")
    return EXIT_OK


def cmd_eval(args):
    from .harness.metrics import compute_miou
    from .harness.training import evaluate, load_checkpoint
    from .harness.scenes import SyntheticScene
    ckpt = load_checkpoint(args.ckpt)
    arrays = load_container(args.dataset)
    if "images" not in arrays or "labels" not in arrays:
        raise InvalidInputError(f"{args.dataset}: dataset needs 'images' and 'labels' arrays")
    scenes = [SyntheticScene(i, l.astype(np.int64)) for i, l in zip(arrays["images"], arrays["labels"])]
    report = evaluate(ckpt.model, ckpt.prompts, scenes, ckpt.config.fingerprint())
    out = _out_dir(args.out)
    _write_json(report.to_dict(), out / "eval_report.json")
    print(f"mIoU {report.miou:.4f}")
    return EXIT_OK


def cmd_ablate(args):
    from .harness.ablation import run_ablation
    from .plotting import plot_ablation
    cfg = _load_cfg(args)
    out = _out_dir(args.out)
    print(f"config fingerprint {cfg.fingerprint()}")
    result = run_ablation(cfg, args.axis, seeds=range(args.seeds),
                          progress=lambda r: log.info("%s seed %d mIoU %.4f", r["arm"], r["seed"], r["miou"]))
    stem = args.axis.replace("-", "_")
    result.write_csv(out / f"ablation_{stem}.csv")
    result.write_runs_csv(out / f"ablation_{stem}_runs.csv")
    plot_ablation(result, out / f"ablation_{stem}.png")
    for s in result.summary:
        print(f"{s.arm}\t{s.mean:.4f}\t{s.stdev:.4f}\t{s.n}")
    return EXIT_OK


def _first(path, name):
    arrays = load_container(path)
    if name in arrays:
        return arrays[name]
    if len(arrays) == 1:
        return next(iter(arrays.values()))
    raise InvalidInputError(f"{path}: expected an array named {name!r}")


def cmd_analyze_gap(args):
    from .analysis import modality_gap_experiment, synthetic_gap_samples
    from .plotting import plot_gap_report
    if args.synthetic:
        samples, ids, cats = synthetic_gap_samples(args.synthetic, seed=args.seed or 0)
    else:
        if args.samples:
            arrays = load_container(args.samples)
            try:
                E, T, V = arrays["E"], arrays["T"], arrays["V"]
            except KeyError as exc:
                raise InvalidInputError(f"{args.samples}: missing array {exc}") from None
        elif args.image and args.text and args.visual:
            E, T, V = _first(args.image, "E"), _first(args.text, "T"), _first(args.visual, "V")
        else:
            raise InvalidConfigError("give --synthetic N, --samples FILE, or --image/--text/--visual")
        if not (E.shape == T.shape == V.shape) or E.ndim != 2:
            raise InvalidInputError("E, T and V must all be (N, D)")
        samples, ids, cats = list(zip(E, T, V)), list(range(len(E))), None
    report = modality_gap_experiment(samples, ids, cats)
    out = _out_dir(args.out)
    _write_json(report.to_dict(), out / "gap_report.json")
    report.write_csv(out / "gap_report.csv")
    plot_gap_report(report, out / "gap_report.png")
    s = report.summary
    print(f"mean cos(E,T) {s['mean_cos_ET']:.4f}  mean cos(E,V) {s['mean_cos_EV']:.4f}  "
          f"win-rate {s['win_rate']:.3f}  excluded {s['n_excluded']}")
    return EXIT_OK


def cmd_heatmap(args):
    from .analysis import cost_volume_heatmap, export_heatmap
    from .plotting import plot_heatmap
    from .promptbank import load_category_set
    arrays = load_container(args.container)
    cats = load_category_set(args.categories)
    k = cats.index(args.category)
    if "features" not in arrays:
        raise InvalidInputError(f"{args.container}: missing 'features' array")
    need = {"text": ["T"], "visual": ["V"], "dual": ["T", "V"]}[args.mode]
    missing = [n for n in need if n not in arrays]
    if missing:
        raise InvalidInputError(f"{args.container}: missing {missing}")
    prompt = (arrays["T"][k], arrays["V"][k]) if args.mode == "dual" else arrays[need[0]][k]
    h = cost_volume_heatmap(arrays["features"], prompt, args.mode, args.category)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_heatmap(h, out, args.format)
    plot_heatmap(h, out.with_suffix(".png"))
    print(out)
    return EXIT_OK


def cmd_gen_data(args):
    from .harness.scenes import generate_scene
    scenes = [generate_scene([args.seed, i], args.K, (args.size, args.size)) for i in range(args.count)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_container({"images": np.stack([s.image for s in scenes]),
                    "labels": np.stack([s.labels for s in scenes]).astype(np.float32)},
                   out, provenance="dpseg gen-data",
                   meta={"seed": args.seed, "count": args.count, "K": args.K, "size": args.size})
    print(out)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dpseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on synthetic scenes")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out", default="runs/train")
    t.set_defaults(func=cmd_train)

    for name, func in (("infer", cmd_infer), ("refine-infer", cmd_refine_infer)):
        s = sub.add_parser(name)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--image", required=True, help=".dpec scene/dataset or an image file")
        s.add_argument("--index", type=int, default=0, help="scene index inside a dataset")
        s.add_argument("--out", default=f"runs/{name}")
        if name == "refine-infer":
            s.add_argument("--threshold", type=float, default=0.005)
            s.add_argument("--padding", type=float, default=0.0)
            s.add_argument("--per-component", action="store_true")
        s.set_defaults(func=func)

    e = sub.add_parser("eval")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", default="runs/eval")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate")
    a.add_argument("--axis", required=True,
                   choices=["prompt-strategy", "fusion", "guidance", "templates", "noise"])
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--config")
    a.add_argument("--steps", type=int)
    a.add_argument("--out", default="runs/ablate")
    a.set_defaults(func=cmd_ablate, seed=None)

    g = sub.add_parser("analyze-gap")
    g.add_argument("--samples", help="container with E, T, V arrays of shape (N, D)")
    g.add_argument("--image")
    g.add_argument("--text")
    g.add_argument("--visual")
    g.add_argument("--synthetic", type=int, help="generate N synthetic samples instead")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="runs/gap")
    g.set_defaults(func=cmd_analyze_gap)

    h = sub.add_parser("heatmap")
    h.add_argument("--container", required=True, help="features (H,W,D) plus T and/or V (K,M,D)")
    h.add_argument("--categories", required=True)
    h.add_argument("--category", required=True)
    h.add_argument("--mode", choices=["text", "visual", "dual"], default="dual")
    h.add_argument("--format", choices=["pgm", "csv"], default="pgm")
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_heatmap)

    d = sub.add_parser("gen-data")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--count", type=int, default=16)
    d.add_argument("--K", type=int, default=4)
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--out", default="runs/data/scenes.dpec")
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"dpseg: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DPSegError, RuntimeError, OSError) as exc:
        print(f"dpseg: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
