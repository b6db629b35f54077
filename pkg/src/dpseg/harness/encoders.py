"""Toy hierarchical encoders standing in for the vision-language backbone."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..errors import InvalidInputError

STRIDES = (4, 2, 2, 2)


@dataclass
class ImageFeaturePyramid:
    """``Ej[j]`` is (B, H/2**j, W/2**j, D_j) for j = 2..5; ``E`` is the
    projected final embedding (B, H/32, W/32, D_z)."""

    Ej: dict
    E: torch.Tensor


class ToyEncoder(nn.Module):
    """Four non-overlapping strided conv stages (1/4, 1/8, 1/16, 1/32),
    each followed by GeLU and a pointwise conv, then an MLP projecting E_5
    to the prompt embedding size.

    Kernel equals stride and there is no padding, so a constant input gives
    spatially constant features.
    """

    def __init__(self, dims=(16, 32, 64, 128), d_z=64, in_ch=3):
        super().__init__()
        self.dims, self.d_z = tuple(dims), d_z
        stages = []
        prev = in_ch
        for d, s in zip(dims, STRIDES):
            stages.append(nn.Sequential(nn.Conv2d(prev, d, s, stride=s), nn.GELU(), nn.Conv2d(d, d, 1)))
            prev = d
        self.stages = nn.ModuleList(stages)
        self.proj = nn.Sequential(nn.Linear(dims[-1], d_z), nn.GELU(), nn.Linear(d_z, d_z))
        # variance-preserving init; the default shrinks activations per layer
        # until the last bias dominates and all embeddings point the same way
        for mod in self.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_uniform_(mod.weight, nonlinearity="relu")
                nn.init.zeros_(mod.bias)

    def forward(self, images) -> ImageFeaturePyramid:
        """images (B, H, W, 3) with H, W divisible by 32."""
        if images.ndim != 4 or images.shape[1] % 32 or images.shape[2] % 32:
            raise InvalidInputError(f"image sides must be multiples of 32, got {tuple(images.shape)}")
        x = images.permute(0, 3, 1, 2)
        feats = {}
        for j, stage in zip((2, 3, 4, 5), self.stages):
            x = stage(x)
            feats[j] = x.permute(0, 2, 3, 1)
        return ImageFeaturePyramid(feats, self.proj(feats[5]))


def toy_image_encoder(image, encoder: ToyEncoder) -> ImageFeaturePyramid:
    """Encode one (H, W, 3) image or a (B, H, W, 3) batch."""
    image = torch.as_tensor(image, dtype=next(encoder.parameters()).dtype)
    single = image.ndim == 3
    pyr = encoder(image.unsqueeze(0) if single else image)
    if single:
        return ImageFeaturePyramid({j: v[0] for j, v in pyr.Ej.items()}, pyr.E[0])
    return pyr


class VisualPromptEncoder:
    """Frozen encoder for prompt images: same architecture as the image
    encoder, plus global average pooling of the final embedding."""

    def __init__(self, encoder: ToyEncoder):
        self.encoder = encoder
        for p in encoder.parameters():
            p.requires_grad_(False)
        encoder.eval()

    @torch.no_grad()
    def __call__(self, prompt_image):
        """(S, S, 3) -> (V (D_z,), {j: (S/2**j, S/2**j, D_j)} for j = 2, 3, 4)."""
        pyr = toy_image_encoder(prompt_image, self.encoder)
        v = pyr.E.mean(dim=(0, 1))
        return v.numpy(), {j: pyr.Ej[j].numpy() for j in (2, 3, 4)}


def toy_visual_prompt_encoder(prompt_image, encoder: ToyEncoder):
    return VisualPromptEncoder(encoder)(prompt_image)
