"""Two-pass inference with prompts rebuilt from first-pass masks.

Pass one segments with the initial prompts. Every detected category is
cropped out of the image through its predicted mask; the crops are embedded
and replace all visual prompts of that category for pass two. Text prompts
and the prompts of undetected categories are left alone.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import InternalConsistencyError, InvalidConfigError
from .promptbank import PromptEmbeddings

log = logging.getLogger(__name__)

INITIAL, REFINED = "initial", "refined-from-mask"


@dataclass(frozen=True)
class RefinementConfig:
    detection_threshold: float = 0.005
    crop_padding: float = 0.0        # fraction of the bbox side added on each side
    prompt_resolution: int = 768
    background_fill: str = "zero"    # "zero" or "mean" (mean colour of the whole image)
    per_component: bool = False
    resample: str = "bilinear"       # "bilinear" or "nearest"

    def __post_init__(self):
        if not 0.0 < self.detection_threshold < 1.0:
            raise InvalidConfigError("detection threshold must lie in (0, 1)")
        if self.prompt_resolution <= 0:
            raise InvalidConfigError("prompt resolution must be positive")
        if self.crop_padding < 0:
            raise InvalidConfigError("crop padding must be non-negative")
        if self.background_fill not in ("zero", "mean"):
            raise InvalidConfigError("background_fill must be 'zero' or 'mean'")
        if self.resample not in ("bilinear", "nearest"):
            raise InvalidConfigError("resample must be 'bilinear' or 'nearest'")


def mask_bbox(mask):
    """Inclusive (row0, col0, row1, col1) of the True pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if not rows.size:
        raise InternalConsistencyError("bounding box of an empty mask")
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def padded_bbox(box, shape, padding):
    r0, c0, r1, c1 = box
    pr = int(round(padding * (r1 - r0 + 1)))
    pc = int(round(padding * (c1 - c0 + 1)))
    return max(r0 - pr, 0), max(c0 - pc, 0), min(r1 + pr, shape[0] - 1), min(c1 + pc, shape[1] - 1)


def crop_region(image, mask, cfg: RefinementConfig):
    """Masked, square-padded crop before resampling, (S, S, 3)."""
    fill = np.zeros(3, image.dtype) if cfg.background_fill == "zero" else image.reshape(-1, 3).mean(0)
    r0, c0, r1, c1 = padded_bbox(mask_bbox(mask), mask.shape, cfg.crop_padding)
    region = np.where(mask[r0:r1 + 1, c0:c1 + 1, None], image[r0:r1 + 1, c0:c1 + 1], fill)
    h, w = region.shape[:2]
    side = max(h, w)
    out = np.empty((side, side, 3), dtype=image.dtype)
    out[...] = fill
    top, left = (side - h) // 2, (side - w) // 2
    out[top:top + h, left:left + w] = region
    return out


def resample(crop, size, mode="bilinear"):
    x = torch.as_tensor(np.ascontiguousarray(crop)).permute(2, 0, 1).unsqueeze(0).float()
    if mode == "nearest":
        y = F.interpolate(x, size=(size, size), mode="nearest")
    else:
        y = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return y[0].permute(1, 2, 0).numpy().astype(crop.dtype)


def extract_category_crops(image, result, cfg: RefinementConfig) -> Dict[int, List[np.ndarray]]:
    """Crops of every detected category, keyed by category index.

    Detection is ``result.scores >= cfg.detection_threshold``. With
    ``per_component`` each connected component yields its own crop.
    """
    image = np.asarray(image)
    labels = np.asarray(result.labels)
    if labels.shape != image.shape[:2]:
        raise InvalidConfigError(f"label map {labels.shape} does not match image {image.shape[:2]}")
    crops = {}
    for k in np.flatnonzero(np.asarray(result.scores) >= cfg.detection_threshold):
        mask = labels == k
        if not mask.any():
            raise InternalConsistencyError(f"category {k} detected with an empty mask")
        if cfg.per_component:
            comp, n = ndimage.label(mask)
            masks = [comp == i for i in range(1, n + 1)]
        else:
            masks = [mask]
        crops[int(k)] = [resample(crop_region(image, m, cfg), cfg.prompt_resolution, cfg.resample)
                         for m in masks]
    return crops


@dataclass
class RefinedPromptSet:
    base: PromptEmbeddings
    overrides: dict = field(default_factory=dict)   # k -> (V_k (M, D_z), {j: (M, Hp, Wp, D_j)})
    provenance: list = field(default_factory=list)

    def embeddings(self) -> PromptEmbeddings:
        """Base prompts with the overrides applied; T is shared, not copied."""
        if not self.overrides:
            return self.base
        V = self.base.V.copy()
        Vj = {j: v.copy() for j, v in self.base.Vj.items()}
        for k, (vk, vjk) in self.overrides.items():
            V[k] = vk
            for j in Vj:
                Vj[j][k] = vjk[j]
        return PromptEmbeddings(self.base.T, V, Vj)

    def equals(self, other: "RefinedPromptSet") -> bool:
        if self.provenance != other.provenance or self.overrides.keys() != other.overrides.keys():
            return False
        return self.embeddings().equals(other.embeddings())


def refine_prompts(base: PromptEmbeddings, crops, embedder: Callable) -> RefinedPromptSet:
    """Replace the visual prompts of every cropped category.

    ``embedder(crop)`` returns ``(v (D_z,), {j: (Hp_j, Wp_j, D_j)})``. One
    crop fills all M slots; several crops fill them round-robin. A failing
    embedder (or one returning the wrong shapes) leaves that category on its
    initial prompts.
    """
    K, M = base.K, base.M
    provenance = [INITIAL] * K
    overrides = {}
    for k in sorted(crops):
        items = crops[k]
        if not items:
            continue
        try:
            embedded = [embedder(c) for c in items]
            slots = [embedded[m % len(embedded)] for m in range(M)]
            vk = np.stack([np.asarray(v, dtype=base.V.dtype) for v, _ in slots])
            vjk = {j: np.stack([np.asarray(maps[j], dtype=base.Vj[j].dtype) for _, maps in slots])
                   for j in base.Vj}
            if vk.shape != base.V[k].shape or any(vjk[j].shape != base.Vj[j][k].shape for j in vjk):
                raise ValueError("embedder output shape does not match the base prompts")
            if not np.all(np.linalg.norm(vk, axis=-1) > 0):
                raise ValueError("embedder produced a zero vector")
        except Exception as exc:  # noqa: BLE001 - any embedder failure falls back
            log.warning("prompt refinement skipped for category %d: %s", k, exc)
            continue
        overrides[k] = (vk, vjk)
        provenance[k] = REFINED
    return RefinedPromptSet(base, overrides, provenance)


def semantic_guided_inference(image, prompts: PromptEmbeddings, model, cfg: RefinementConfig,
                              embedder: Callable):
    """Run both passes with the same model weights.

    ``model.predict(image, prompts)`` must return a SegmentationResult.
    Returns ``{"pass1", "pass2", "refined"}``.
    """
    pass1 = model.predict(image, prompts)
    refined = refine_prompts(prompts, extract_category_crops(image, pass1, cfg), embedder)
    pass2 = model.predict(image, refined.embeddings())
    return {"pass1": pass1, "pass2": pass2, "refined": refined}
