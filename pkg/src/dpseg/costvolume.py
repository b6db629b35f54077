"""Cost-volume mathematics: prompt fusion, cosine cost volumes, per-slice
embedding and the pooled visual cost volumes.

Tensors use a channels-last layout with optional leading batch axes:
image features are (..., H, W, D), prompt tensors (K, M, D), and every cost
volume is (..., H, W, K, M).
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateVectorError, DimensionError, InvalidConfigError

DEGENERATE_NORM = 1e-12
STRATEGIES = ("dual-embed", "concat-cos", "avg-cos")


def _tensor(x):
    if isinstance(x, np.ndarray) and not x.flags.writeable:
        x = x.copy()
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    return t


def _check_norms(norms, what):
    bad = norms < DEGENERATE_NORM
    if bool(bad.any()):
        index = tuple(int(i) for i in torch.nonzero(bad)[0])
        raise DegenerateVectorError(f"{what} vector at index {index} has zero norm", index=index)


def cosine_volume(feats, refs, feats_name="image feature", refs_name="prompt"):
    """Cosine similarity of every feature vector against every reference.

    feats (..., H, W, D), refs (K, M, D) -> (..., H, W, K, M). Computed in
    float64 and clamped to [-1, 1], then cast back to the promoted input dtype.
    """
    feats, refs = _tensor(feats), _tensor(refs)
    if feats.shape[-1] != refs.shape[-1]:
        raise DimensionError(f"feature dim {feats.shape[-1]} != prompt dim {refs.shape[-1]}")
    if refs.ndim != 3 or feats.ndim < 3:
        raise DimensionError("expected features (..., H, W, D) and prompts (K, M, D)")
    out_dtype = torch.promote_types(feats.dtype, refs.dtype)
    f64, r64 = feats.double(), refs.double()
    fn, rn = f64.norm(dim=-1), r64.norm(dim=-1)
    _check_norms(fn.detach(), feats_name)
    _check_norms(rn.detach(), refs_name)
    f64 = f64 / fn.unsqueeze(-1)
    r64 = r64 / rn.unsqueeze(-1)
    cv = torch.einsum("...d,kmd->...km", f64, r64).clamp(-1.0, 1.0)
    return cv.to(out_dtype)


def fuse_prompts(T, V):
    """Dual prompt R = (T + V) / 2 per (category, template)."""
    T, V = _tensor(T), _tensor(V)
    if T.shape != V.shape:
        raise DimensionError(f"T {tuple(T.shape)} and V {tuple(V.shape)} differ")
    return (T + V) / 2


def compute_cost_volume(E, R):
    """Cosine cost volume between image embedding E (..., H, W, D_z) and
    prompts R (K, M, D_z)."""
    return cosine_volume(E, R, "image embedding", "prompt")


def embed_cost_volume(cv, weight, bias=None):
    """Apply one shared 2D convolution to each category slice.

    cv (..., H, W, K, M); weight (d_F, M, kh, kw) with odd kernel sides,
    zero padding keeps the spatial size. Returns (..., H, W, K, d_F).
    """
    cv, weight = _tensor(cv), _tensor(weight)
    if weight.ndim != 4 or weight.shape[1] != cv.shape[-1]:
        raise DimensionError(
            f"conv expects {weight.shape[1] if weight.ndim == 4 else '?'} input channels, "
            f"cost volume has {cv.shape[-1]}")
    kh, kw = weight.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("cost embedding kernel sides must be odd")
    lead = cv.shape[:-4]
    H, W, K, M = cv.shape[-4:]
    x = cv.reshape(-1, H, W, K, M).permute(0, 3, 4, 1, 2).reshape(-1, M, H, W)
    y = F.conv2d(x, weight.to(x.dtype), None if bias is None else _tensor(bias).to(x.dtype),
                 padding=(kh // 2, kw // 2))
    d = weight.shape[0]
    y = y.reshape(-1, K, d, H, W).permute(0, 3, 4, 1, 2)
    return y.reshape(*lead, H, W, K, d)


def pool_prompt_maps(Vj):
    """Global average over the prompt map's own spatial axes: (K, M, Hp, Wp, D) -> (K, M, D)."""
    Vj = _tensor(Vj)
    if Vj.ndim != 5:
        raise DimensionError(f"prompt feature map must be (K, M, Hp, Wp, D), got {tuple(Vj.shape)}")
    return Vj.mean(dim=(2, 3))


def compute_visual_cost_volume(Ej, Vj):
    """Visual cost volume at one scale.

    Ej (..., H_j, W_j, D_j) image features, Vj (K, M, Hp_j, Wp_j, D_j)
    prompt feature maps -> (..., H_j, W_j, K, M).
    """
    Ej, Vj = _tensor(Ej), _tensor(Vj)
    pooled = pool_prompt_maps(Vj)
    if Ej.shape[-1] != pooled.shape[-1]:
        raise DimensionError(f"image feature dim {Ej.shape[-1]} != prompt feature dim {pooled.shape[-1]}")
    return cosine_volume(Ej, pooled, "image feature", "pooled prompt")


def fuse_cost_volumes(T, V, E, strategy="dual-embed"):
    """Cost volume under one of the fusion strategies.

    dual-embed: cos(E, (T+V)/2), (..., K, M)
    concat-cos: [cos(E, T), cos(E, V)] along the template axis, (..., K, 2M)
    avg-cos:    (cos(E, T) + cos(E, V)) / 2, (..., K, M)
    """
    if strategy == "dual-embed":
        return compute_cost_volume(E, fuse_prompts(T, V))
    if strategy not in STRATEGIES:
        raise InvalidConfigError(f"unknown fusion strategy {strategy!r}; expected one of {STRATEGIES}")
    ct = compute_cost_volume(E, T)
    cv = compute_cost_volume(E, V)
    if strategy == "concat-cos":
        return torch.cat([ct, cv], dim=-1)
    return (ct + cv) / 2
