"""Ablation driver: every arm is trained and scored on the same seeds and
the same scenes."""
from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import dataclass, field

from ..errors import InternalConsistencyError, InvalidConfigError
from .config import TrainConfig
from .training import EVAL_SPLIT, TRAIN_SPLIT, dataset_fingerprint, evaluate, make_scenes, run_training

log = logging.getLogger(__name__)

AXES = {
    "prompt-strategy": [
        ("T", {"prompt_mode": "text", "guidance": "none"}),
        ("V", {"prompt_mode": "visual"}),
        ("Avg(T,V)", {"prompt_mode": "dual", "fusion": "dual-embed"}),
    ],
    "fusion": [
        ("Cat(cos(T,E),cos(V,E))", {"fusion": "concat-cos"}),
        ("Avg(cos(T,E),cos(V,E))", {"fusion": "avg-cos"}),
        ("Fc", {"fusion": "dual-embed"}),
    ],
    "guidance": [
        ("Fc", {"guidance": "none"}),
        ("Fc+Fv2", {"guidance": "visual", "guidance_scales": (2,)}),
        ("Fc+Fv23", {"guidance": "visual", "guidance_scales": (3, 2)}),
        ("Fc+Fv234", {"guidance": "visual", "guidance_scales": (4, 3, 2)}),
        ("Fc+upsampled Fc", {"guidance": "upsampled", "guidance_scales": (4, 3, 2)}),
    ],
    "templates": [
        ("M=1", {"M": 1}),
        ("M=4", {"M": 4}),
        ("M=16", {"M": 16}),
    ],
    "noise": [
        ("0%", {"prompt_noise": 0.0}),
        ("20%", {"prompt_noise": 0.2}),
        ("60%", {"prompt_noise": 0.6}),
        ("80%", {"prompt_noise": 0.8}),
    ],
}


@dataclass
class ArmSummary:
    arm: str
    mean: float
    stdev: float
    n: int


@dataclass
class AblationResult:
    axis: str
    rows: list                       # dicts: arm, seed, miou, final_loss, data_fingerprint
    summary: list = field(default_factory=list)

    def mean(self, arm) -> float:
        return next(s.mean for s in self.summary if s.arm == arm)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "arm", "miou_mean", "miou_stdev", "n_seeds"])
            for s in self.summary:
                w.writerow([self.axis, s.arm, f"{s.mean:.6f}", f"{s.stdev:.6f}", s.n])

    def write_runs_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "arm", "seed", "miou", "final_loss", "data_fingerprint"])
            for r in self.rows:
                w.writerow([self.axis, r["arm"], r["seed"], f"{r['miou']:.6f}",
                            f"{r['final_loss']:.6f}", r["data_fingerprint"]])


def run_ablation(base: TrainConfig, axis: str, seeds=(0, 1, 2, 3, 4), progress=None) -> AblationResult:
    if axis not in AXES:
        raise InvalidConfigError(f"unknown ablation axis {axis!r}; expected one of {sorted(AXES)}")
    rows = []
    for seed in seeds:
        cfg0 = base.with_(seed=seed)
        train = make_scenes(cfg0, TRAIN_SPLIT, cfg0.train_scenes)
        held_out = make_scenes(cfg0, EVAL_SPLIT, cfg0.eval_scenes)
        held_fp = dataset_fingerprint(held_out)
        seen = set()
        for arm, overrides in AXES[axis]:
            cfg = cfg0.with_(**overrides)
            result = run_training(cfg, scenes=train)
            report = evaluate(result.model, result.prompt_tensors, held_out, cfg.fingerprint())
            fp = f"{result.data_fingerprint}/{held_fp}"
            seen.add(fp)
            if len(seen) != 1:
                raise InternalConsistencyError(f"arm {arm} saw different data for seed {seed}")
            row = {"arm": arm, "seed": seed, "miou": report.miou,
                   "final_loss": result.losses[-1] if result.losses else float("nan"),
                   "data_fingerprint": fp}
            rows.append(row)
            log.info("%s / %s / seed %d: mIoU %.4f", axis, arm, seed, report.miou)
            if progress is not None:
                progress(row)
    summary = []
    for arm, _ in AXES[axis]:
        vals = [r["miou"] for r in rows if r["arm"] == arm]
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        summary.append(ArmSummary(arm, statistics.fmean(vals), sd, len(vals)))
    return AblationResult(axis, rows, summary)
