"""Full network: trainable image encoder, cost-volume embedding and the
cost-volume-guided decoder, driven by a frozen prompt set."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..costvolume import (STRATEGIES, compute_cost_volume, compute_visual_cost_volume,
                          embed_cost_volume, fuse_cost_volumes)
from ..decoder import CostVolumeGuidedDecoder, DecoderConfig, SegmentationResult, bce_loss
from ..errors import InvalidConfigError
from ..promptbank import PromptEmbeddings
from .encoders import ToyEncoder, VisualPromptEncoder

PROMPT_MODES = ("dual", "text", "visual")
GUIDANCE_MODES = ("visual", "upsampled", "none")


@dataclass
class PromptTensors:
    T: torch.Tensor
    V: torch.Tensor
    Vj: dict

    @classmethod
    def from_embeddings(cls, p: PromptEmbeddings, dtype=torch.float32):
        return cls(torch.as_tensor(p.T, dtype=dtype), torch.as_tensor(p.V, dtype=dtype),
                   {j: torch.as_tensor(v, dtype=dtype) for j, v in p.Vj.items()})


class DPSegNet(nn.Module):
    """``prompt_mode`` picks what the main cost volume is built from
    (``dual`` uses ``fusion``); ``guidance`` picks what the decoder stages
    receive at ``guidance_scales``: visual cost volumes, the main cost volume
    bilinearly resized, or nothing."""

    def __init__(self, encoder_dims=(16, 32, 64, 128), d_z=64, M=4, hidden_dims=(62, 32, 16),
                 d_F=128, embed_kernel=3, prompt_mode="dual", fusion="dual-embed",
                 guidance="visual", guidance_scales=(4, 3, 2), detection_threshold=0.005):
        super().__init__()
        if prompt_mode not in PROMPT_MODES:
            raise InvalidConfigError(f"prompt_mode must be one of {PROMPT_MODES}")
        if fusion not in STRATEGIES:
            raise InvalidConfigError(f"fusion must be one of {STRATEGIES}")
        if guidance not in GUIDANCE_MODES:
            raise InvalidConfigError(f"guidance must be one of {GUIDANCE_MODES}")
        self.prompt_mode, self.fusion, self.guidance = prompt_mode, fusion, guidance
        fc_channels = 2 * M if (prompt_mode == "dual" and fusion == "concat-cos") else M
        self.fc_channels = fc_channels
        scales = () if guidance == "none" else tuple(guidance_scales)
        self.image_encoder = ToyEncoder(encoder_dims, d_z)
        self.cost_embed = nn.Conv2d(fc_channels, d_F, embed_kernel, padding=embed_kernel // 2)
        guide_ch = fc_channels if guidance == "upsampled" else M
        self.decoder = CostVolumeGuidedDecoder(DecoderConfig(
            hidden_dims=hidden_dims, d_F=d_F, guidance_channels=guide_ch,
            scale_dims={2: encoder_dims[0], 3: encoder_dims[1], 4: encoder_dims[2]},
            guidance_scales=scales, detection_threshold=detection_threshold))

    def prompt_encoder(self) -> VisualPromptEncoder:
        """Frozen copy of the current image encoder weights."""
        return VisualPromptEncoder(copy.deepcopy(self.image_encoder))

    def cost_volume(self, E, prompts: PromptTensors):
        if self.prompt_mode == "text":
            return compute_cost_volume(E, prompts.T)
        if self.prompt_mode == "visual":
            return compute_cost_volume(E, prompts.V)
        return fuse_cost_volumes(prompts.T, prompts.V, E, self.fusion)

    def forward(self, images, prompts: PromptTensors):
        """images (B, H, W, 3) -> logits (B, H, W, K)."""
        pyr = self.image_encoder(images)
        Fc = self.cost_volume(pyr.E, prompts)
        F_emb = embed_cost_volume(Fc, self.cost_embed.weight, self.cost_embed.bias)
        guides = {}
        for j in self.decoder.config.guidance_scales:
            if self.guidance == "visual":
                guides[j] = compute_visual_cost_volume(pyr.Ej[j], prompts.Vj[j])
            else:
                guides[j] = _resize_volume(Fc, pyr.Ej[j].shape[1:3])
        return self.decoder(F_emb, pyr.Ej, guides)

    def loss(self, batch):
        images, labels, prompts = batch
        return bce_loss(self(images, prompts), labels)

    @torch.no_grad()
    def predict(self, image, prompts) -> SegmentationResult:
        if isinstance(prompts, PromptEmbeddings):
            prompts = PromptTensors.from_embeddings(prompts)
        image = torch.as_tensor(np.asarray(image), dtype=torch.float32)
        logits = self(image.unsqueeze(0), prompts)[0]
        return SegmentationResult.from_logits(logits, self.decoder.config.detection_threshold)


def _resize_volume(cv, size):
    """Bilinear resize of (B, H, W, K, C) to (B, h, w, K, C)."""
    B, H, W, K, C = cv.shape
    x = cv.permute(0, 3, 4, 1, 2).reshape(B, K * C, H, W)
    y = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
    return y.reshape(B, K, C, *size).permute(0, 3, 4, 1, 2)
