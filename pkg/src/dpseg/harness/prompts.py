"""Prompt sets for the synthetic world.

Visual prompts come from encoding per-template exemplar images with the
frozen prompt encoder. Text prompts are produced by the seeded provider,
mixed around class anchors (the mean visual embedding of each class) with a
smaller weight than an exemplar would have, which models the gap between
the text and image modalities.
"""
from __future__ import annotations

import numpy as np

from ..promptbank import CategorySet, PromptDims, PromptEmbeddings, TemplateBank, synthetic_prompt_provider
from .encoders import VisualPromptEncoder
from .scenes import generate_prompt_image

ANCHOR_VARIANTS = 16


def default_categories(K):
    return CategorySet(["background"] + [f"class{k}" for k in range(1, K)])


def encode_visual_prompts(encoder: VisualPromptEncoder, K, M, size, seed):
    V, Vj = [], {2: [], 3: [], 4: []}
    for k in range(K):
        row, maps = [], {2: [], 3: [], 4: []}
        for m in range(M):
            v, vj = encoder(generate_prompt_image(k, m, K, size, seed))
            row.append(v)
            for j in maps:
                maps[j].append(vj[j])
        V.append(row)
        for j in maps:
            Vj[j].append(maps[j])
    return np.asarray(V, np.float32), {j: np.asarray(v, np.float32) for j, v in Vj.items()}


def class_anchors(encoder: VisualPromptEncoder, K, size, seed):
    """Mean prompt embedding per class over many exemplar variants."""
    V, _ = encode_visual_prompts(encoder, K, ANCHOR_VARIANTS, size, seed + 7919)
    return V.mean(axis=1)


def build_prompt_set(encoder: VisualPromptEncoder, K, M, size=64, seed=0,
                     text_correlation=0.6) -> PromptEmbeddings:
    V, Vj = encode_visual_prompts(encoder, K, M, size, seed)
    anchors = class_anchors(encoder, K, size, seed)
    d_z = V.shape[-1]
    dims = PromptDims(d_z=d_z, scale_dims={j: Vj[j].shape[-1] for j in Vj}, prompt_size=size)
    text = synthetic_prompt_provider(seed, default_categories(K), TemplateBank.default(M), dims,
                                     correlation=1.0, text_correlation=text_correlation,
                                     latents=anchors)
    # T is unit-norm from the provider; put it on the scale of the visual prompts
    scale = np.linalg.norm(V, axis=-1, keepdims=True).mean()
    return PromptEmbeddings((text.T * scale).astype(np.float32), V, Vj)
