"""Training, evaluation and checkpointing on synthetic scenes."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..container import load_container, save_container
from ..decoder import OptimizerConfig, make_optimizer, train_step
from ..errors import InvalidConfigError
from ..promptbank import PromptEmbeddings, add_prompt_noise
from .config import TrainConfig
from .encoders import ToyEncoder, VisualPromptEncoder
from .metrics import EvalReport, confusion_matrix, report_from_confusion
from .model import DPSegNet, PromptTensors
from .prompts import build_prompt_set
from .scenes import generate_scene

log = logging.getLogger(__name__)

TRAIN_SPLIT, EVAL_SPLIT, BATCH_STREAM, NOISE_STREAM = 0, 1, 2, 3


def make_scenes(cfg: TrainConfig, split: int, count: int):
    return [generate_scene([cfg.seed, split, i], cfg.K, (cfg.image_size, cfg.image_size),
                           (cfg.shapes_min, cfg.shapes_max)) for i in range(count)]


def dataset_fingerprint(scenes) -> str:
    h = hashlib.sha256()
    for s in scenes:
        h.update(s.image.tobytes())
        h.update(s.labels.astype(np.int64).tobytes())
    return h.hexdigest()[:16]


def build_model(cfg: TrainConfig) -> DPSegNet:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return DPSegNet(encoder_dims=cfg.encoder_dims, d_z=cfg.d_z, M=cfg.M,
                        hidden_dims=cfg.hidden_dims, d_F=cfg.d_F, embed_kernel=cfg.embed_kernel,
                        prompt_mode=cfg.prompt_mode, fusion=cfg.fusion, guidance=cfg.guidance,
                        guidance_scales=cfg.guidance_scales,
                        detection_threshold=cfg.detection_threshold)


def build_prompts(cfg: TrainConfig, encoder: VisualPromptEncoder) -> PromptEmbeddings:
    prompts = build_prompt_set(encoder, cfg.K, cfg.M, cfg.prompt_size, cfg.seed, cfg.text_correlation)
    if cfg.prompt_noise > 0:
        prompts = add_prompt_noise(prompts, cfg.prompt_noise, seed=cfg.seed * 7 + NOISE_STREAM)
    return prompts


@dataclass
class TrainResult:
    config: TrainConfig
    model: DPSegNet
    prompt_encoder: VisualPromptEncoder
    prompts: PromptEmbeddings
    losses: list
    data_fingerprint: str

    @property
    def prompt_tensors(self) -> PromptTensors:
        return PromptTensors.from_embeddings(self.prompts)


def run_training(cfg: TrainConfig, scenes=None, progress=None) -> TrainResult:
    """Train encoder, cost embedding and decoder with frozen prompts.

    Deterministic per ``cfg.seed``. ``losses[i]`` is the loss of step i.
    """
    torch.set_num_threads(1)
    model = build_model(cfg)
    prompt_encoder = model.prompt_encoder()
    prompts = build_prompts(cfg, prompt_encoder)
    pt = PromptTensors.from_embeddings(prompts)
    scenes = scenes if scenes is not None else make_scenes(cfg, TRAIN_SPLIT, cfg.train_scenes)
    images = torch.as_tensor(np.stack([s.image for s in scenes]))
    labels = torch.as_tensor(np.stack([s.labels for s in scenes]))
    opt = make_optimizer(model, OptimizerConfig(cfg.lr, cfg.weight_decay, cfg.encoder_lr_factor))
    rng = np.random.default_rng([cfg.seed, BATCH_STREAM])
    losses = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.as_tensor(rng.choice(len(scenes), size=min(cfg.batch_size, len(scenes)),
                                         replace=False))
        losses.append(train_step(model, opt, (images[idx], labels[idx], pt), step))
        if progress is not None:
            progress(step, losses[-1])
    model.eval()
    return TrainResult(cfg, model, prompt_encoder, prompts, losses, dataset_fingerprint(scenes))


@torch.no_grad()
def evaluate(model: DPSegNet, prompts, scenes, fingerprint="") -> EvalReport:
    if isinstance(prompts, PromptEmbeddings):
        prompts = PromptTensors.from_embeddings(prompts)
    K = prompts.T.shape[0]
    conf = np.zeros((K, K), dtype=np.int64)
    for s in scenes:
        conf += confusion_matrix(model.predict(s.image, prompts).labels, s.labels, K)
    return report_from_confusion(conf, fingerprint)


def evaluate_result(result: TrainResult, scenes=None) -> EvalReport:
    cfg = result.config
    scenes = scenes if scenes is not None else make_scenes(cfg, EVAL_SPLIT, cfg.eval_scenes)
    return evaluate(result.model, result.prompt_tensors, scenes, cfg.fingerprint())


def save_loss_curve(losses, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, l in enumerate(losses):
            w.writerow([i, repr(float(l))])


def save_checkpoint(result: TrainResult, path):
    arrays = {f"model.{k}": v for k, v in result.model.state_dict().items()}
    arrays.update({f"prompt_encoder.{k}": v for k, v in result.prompt_encoder.encoder.state_dict().items()})
    arrays.update({f"prompts.{k}": v for k, v in result.prompts.to_arrays().items()})
    meta = {"kind": "dpseg-checkpoint", "config": result.config.to_dict(),
            "fingerprint": result.config.fingerprint(), "data_fingerprint": result.data_fingerprint}
    save_container(arrays, path, provenance="dpseg train", meta=meta)


def load_checkpoint(path) -> TrainResult:
    arrays, manifest = load_container(path, with_meta=True)
    meta = manifest.get("meta", {})
    if meta.get("kind") != "dpseg-checkpoint":
        raise InvalidConfigError(f"{path} is not a dpseg checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    model = build_model(cfg)
    model.load_state_dict({k[6:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("model.")})
    model.eval()
    enc = ToyEncoder(cfg.encoder_dims, cfg.d_z)
    enc.load_state_dict({k[15:]: torch.as_tensor(v) for k, v in arrays.items()
                         if k.startswith("prompt_encoder.")})
    prompts = PromptEmbeddings.from_arrays(arrays, prefix="prompts.")
    return TrainResult(cfg, model, VisualPromptEncoder(enc), prompts, [], meta.get("data_fingerprint", ""))
