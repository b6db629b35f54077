"""Cost-volume-guided decoder, per-pixel BCE loss, training step and a
finite-difference gradient checker.

Inside the network every per-category tensor is laid out (B, K, C, H, W) so
that folding K into the batch axis gives convolutions whose weights are
shared across categories. Public entry points (``CostVolumeGuidedDecoder.forward``
and ``decode``) take channels-last volumes as produced by ``costvolume``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (DimensionError, DivergenceError, InvalidConfigError,
                     InvalidInputError, InvalidLabelError)

DETECTION_THRESHOLD = 0.005


@dataclass
class DecoderConfig:
    hidden_dims: tuple = (62, 32, 16)
    d_F: int = 128
    guidance_channels: int = 4          # M, or 2M when guiding with a concatenated volume
    scale_dims: Dict[int, int] = field(default_factory=lambda: {2: 16, 3: 32, 4: 64})
    dilation_rates: tuple = (1, 2, 4)
    kernel: int = 3
    encoder_reduction: int = 16
    final_upsample: int = 4
    mlp_ratio: int = 4
    guidance_scales: tuple = (4, 3, 2)  # scales that receive a guidance volume
    detection_threshold: float = DETECTION_THRESHOLD

    def __post_init__(self):
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        self.dilation_rates = tuple(int(d) for d in self.dilation_rates)
        self.guidance_scales = tuple(int(j) for j in self.guidance_scales)
        self.scale_dims = {int(j): int(d) for j, d in self.scale_dims.items()}
        self.validate()

    @property
    def stages(self) -> int:
        return len(self.hidden_dims)

    def validate(self):
        if self.stages != 3 or any(d <= 0 for d in self.hidden_dims):
            raise InvalidConfigError("hidden_dims must hold three positive sizes")
        rates = self.dilation_rates
        if not rates or rates[0] != 1 or any(b <= a for a, b in zip(rates, rates[1:])):
            raise InvalidConfigError("dilation rates must increase strictly from 1")
        if self.kernel % 2 == 0:
            raise InvalidConfigError("kernel side must be odd")
        if self.d_F <= 0 or self.guidance_channels <= 0 or self.mlp_ratio <= 0:
            raise InvalidConfigError("channel counts must be positive")
        for j in (2, 3, 4):
            dj = self.scale_dims.get(j)
            if dj is None or dj <= 0 or dj % self.encoder_reduction:
                raise InvalidConfigError(
                    f"D_{j}={dj} must be positive and divisible by {self.encoder_reduction}")
        if not set(self.guidance_scales) <= {2, 3, 4}:
            raise InvalidConfigError("guidance scales must be drawn from {2, 3, 4}")
        if not 0.0 < self.detection_threshold < 1.0:
            raise InvalidConfigError("detection threshold must lie in (0, 1)")

    def stage_scale(self, i: int) -> int:
        """Encoder scale injected after stage ``i`` (0-based): 4, 3, 2."""
        return 4 - i

    def injected_channels(self, i: int) -> int:
        j = self.stage_scale(i)
        extra = self.guidance_channels if j in self.guidance_scales else 0
        return self.hidden_dims[i] + self.scale_dims[j] // self.encoder_reduction + extra

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_dims"] = {str(j): v for j, v in self.scale_dims.items()}
        return d

    @classmethod
    def from_dict(cls, d) -> "DecoderConfig":
        d = dict(d)
        if "scale_dims" in d:
            d["scale_dims"] = {int(j): int(v) for j, v in d["scale_dims"].items()}
        return cls(**d)


def _fold(x):
    B, K, C, H, W = x.shape
    return x.reshape(B * K, C, H, W), (B, K)


def _unfold(y, bk):
    B, K = bk
    return y.reshape(B, K, *y.shape[1:])


class CategoryAttention(nn.Module):
    """Single-head scaled dot-product attention across the K category tokens
    at each spatial location. Input and output are (..., K, C)."""

    def __init__(self, dim):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, x):
        q, k, v = self.q(x), self.k(x), self.v(x)
        weights = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        return self.out(weights @ v)


class HDConvBlock(nn.Module):
    """Hybrid dilated convolution block.

    Parallel 3x3 convolutions at dilations 1, 2, 4 (receptive fields 3, 5, 9)
    are summed, layer-normalized over channels, passed through a GeLU MLP
    and then through category attention. MLP and attention are residual.
    """

    def __init__(self, in_ch, out_ch, dilations=(1, 2, 4), kernel=3, mlp_ratio=4):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.branches = nn.ModuleList(
            nn.Conv2d(in_ch, out_ch, kernel, padding=d * (kernel // 2), dilation=d)
            for d in dilations)
        self.norm = nn.LayerNorm(out_ch)
        self.mlp = nn.Sequential(nn.Linear(out_ch, out_ch * mlp_ratio), nn.GELU(),
                                 nn.Linear(out_ch * mlp_ratio, out_ch))
        self.attn = CategoryAttention(out_ch)

    def merged_conv(self, x):
        """Sum of the dilated branches, (B, K, C, H, W) -> (B, K, C', H, W)."""
        if x.shape[2] != self.in_ch:
            raise DimensionError(f"HD block expects {self.in_ch} channels, got {x.shape[2]}")
        flat, bk = _fold(x)
        y = self.branches[0](flat)
        for branch in self.branches[1:]:
            y = y + branch(flat)
        return _unfold(y, bk)

    def forward(self, x):
        y = self.merged_conv(x).permute(0, 3, 4, 1, 2)   # (B, H, W, K, C')
        y = self.norm(y)
        y = y + self.mlp(y)
        y = y + self.attn(y)
        return y.permute(0, 3, 4, 1, 2)


class UpsampleStage(nn.Module):
    """Stride-2 transposed convolution shared across categories."""

    def __init__(self, channels):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(channels, channels, kernel_size=2, stride=2)

    def forward(self, x):
        flat, bk = _fold(x)
        return _unfold(self.deconv(flat), bk)


class GuidanceInjection(nn.Module):
    """Concatenate channel-reduced encoder features and a guidance volume.

    The encoder features are detached first, so no gradient reaches the
    image encoder through this path.
    """

    def __init__(self, feat_dim, reduction=16):
        super().__init__()
        if feat_dim % reduction:
            raise InvalidConfigError(f"feature dim {feat_dim} not divisible by {reduction}")
        self.reduce = nn.Conv2d(feat_dim, feat_dim // reduction, kernel_size=1)

    def forward(self, x, Ej, guide=None):
        """x (B, K, C, H, W); Ej (B, H, W, D_j); guide (B, H, W, K, G) or None."""
        B, K, _, H, W = x.shape
        if Ej.shape[1:3] != (H, W):
            raise DimensionError(f"encoder features {tuple(Ej.shape[1:3])} vs decoder {(H, W)}")
        e = self.reduce(Ej.detach().permute(0, 3, 1, 2))
        parts = [x, e.unsqueeze(1).expand(B, K, *e.shape[1:])]
        if guide is not None:
            if guide.shape[1:4] != (H, W, K):
                raise DimensionError(f"guidance volume {tuple(guide.shape[1:4])} vs decoder {(H, W, K)}")
            parts.append(guide.permute(0, 3, 4, 1, 2).to(x.dtype))
        return torch.cat(parts, dim=2)


class CostVolumeGuidedDecoder(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = cfg = config
        in_ch = cfg.d_F
        self.blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        self.injections = nn.ModuleList()
        for i, d in enumerate(cfg.hidden_dims):
            self.blocks.append(HDConvBlock(in_ch, d, cfg.dilation_rates, cfg.kernel, cfg.mlp_ratio))
            self.upsamples.append(UpsampleStage(d))
            self.injections.append(
                GuidanceInjection(cfg.scale_dims[cfg.stage_scale(i)], cfg.encoder_reduction))
            in_ch = cfg.injected_channels(i)
        self.head = nn.Conv2d(in_ch, 1, kernel_size=1)

    def forward(self, F_emb, Ej: Mapping[int, torch.Tensor], guides: Mapping[int, torch.Tensor]):
        """F_emb (B, H5, W5, K, d_F) -> logits (B, H_in, W_in, K).

        ``Ej`` maps scales 2, 3, 4 to (B, H_j, W_j, D_j); ``guides`` maps every
        configured guidance scale to a (B, H_j, W_j, K, G) volume.
        """
        cfg = self.config
        missing = [j for j in cfg.guidance_scales if j not in guides]
        if missing:
            raise InvalidInputError(f"missing guidance volume for scale(s) {missing}")
        if F_emb.shape[-1] != cfg.d_F:
            raise DimensionError(f"embedded cost volume has {F_emb.shape[-1]} channels, expected {cfg.d_F}")
        x = F_emb.permute(0, 3, 4, 1, 2)
        for i in range(cfg.stages):
            j = cfg.stage_scale(i)
            x = self.upsamples[i](self.blocks[i](x))
            x = self.injections[i](x, Ej[j], guides[j] if j in cfg.guidance_scales else None)
        flat, bk = _fold(x)
        logits = self.head(flat)                          # (B*K, 1, H/4, W/4)
        logits = F.interpolate(logits, scale_factor=cfg.final_upsample, mode="bilinear",
                               align_corners=False)
        B, K = bk
        return logits.reshape(B, K, *logits.shape[-2:]).permute(0, 2, 3, 1)


@dataclass
class SegmentationResult:
    logits: np.ndarray      # (H, W, K)
    labels: np.ndarray      # (H, W)
    detected: np.ndarray    # (K,)
    scores: np.ndarray      # (K,) pixel fraction per category

    @classmethod
    def from_logits(cls, logits, threshold=DETECTION_THRESHOLD) -> "SegmentationResult":
        if isinstance(logits, torch.Tensor):
            logits = logits.detach().cpu().numpy()
        logits = np.asarray(logits)
        K = logits.shape[-1]
        labels = np.argmax(logits, axis=-1)   # first maximum wins ties
        scores = np.bincount(labels.ravel(), minlength=K) / labels.size
        return cls(logits, labels, scores >= threshold, scores)


def decode(F_emb, pyramid, Fv, decoder: CostVolumeGuidedDecoder):
    """Run the decoder on one image (unbatched inputs) or a batch.

    ``pyramid`` is anything with an ``Ej`` mapping (scales 2..4). Returns a
    SegmentationResult, or a list of them for batched input.
    """
    F_emb = torch.as_tensor(F_emb)
    Ej = {j: torch.as_tensor(pyramid.Ej[j]) for j in (2, 3, 4)}
    Fv = {j: torch.as_tensor(v) for j, v in Fv.items()}
    single = F_emb.ndim == 4
    if single:
        F_emb = F_emb.unsqueeze(0)
        Ej = {j: v.unsqueeze(0) for j, v in Ej.items()}
        Fv = {j: v.unsqueeze(0) for j, v in Fv.items()}
    with torch.no_grad():
        logits = decoder(F_emb, Ej, Fv)
    thr = decoder.config.detection_threshold
    results = [SegmentationResult.from_logits(l, thr) for l in logits]
    return results[0] if single else results


def bce_loss(logits, target):
    """Mean per-pixel, per-category binary cross-entropy.

    logits (..., H, W, K), integer target (..., H, W). Uses
    max(z, 0) - z*y + log(1 + exp(-|z|)).
    """
    logits = torch.as_tensor(logits)
    target = torch.as_tensor(target).long()
    K = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"target {tuple(target.shape)} vs logits {tuple(logits.shape)}")
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= K):
        raise InvalidLabelError(f"labels must lie in [0, {K})")
    y = F.one_hot(target, K).to(logits.dtype)
    z = logits
    return (z.clamp(min=0) - z * y + torch.log1p(torch.exp(-z.abs()))).mean()


@dataclass
class OptimizerConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    encoder_lr_factor: float = 0.01   # multiplier on image-encoder parameters
    betas: tuple = (0.9, 0.999)


def make_optimizer(model: nn.Module, cfg: OptimizerConfig, encoder_prefix="image_encoder."):
    """AdamW with the encoder parameter group scaled by ``encoder_lr_factor``."""
    enc, rest = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (enc if name.startswith(encoder_prefix) else rest).append(p)
    groups = [{"params": rest, "lr": cfg.lr}]
    if enc:
        groups.append({"params": enc, "lr": cfg.lr * cfg.encoder_lr_factor})
    return torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay,
                             betas=tuple(cfg.betas))


def train_step(model, optimizer, batch, step=0):
    """One forward/backward/update. ``model.loss(batch)`` must return a scalar."""
    optimizer.zero_grad(set_to_none=True)
    loss = model.loss(batch)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {float(loss.detach())} at step {step}", step=step)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@dataclass
class GradCheckReport:
    max_rel_err: float
    failing: list
    per_param: dict
    checked: int

    @property
    def ok(self) -> bool:
        return not self.failing


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
               eps=1e-5, tolerance=1e-4, max_coords: Optional[int] = None, seed=0,
               analytic: Optional[Mapping[str, torch.Tensor]] = None, abs_floor=1e-6):
    """Compare autograd gradients against central finite differences.

    Each checked coordinate is perturbed by ``+-eps`` in place. Relative error
    is ``|a - n| / max(|a|, |n|, abs_floor)``. ``max_coords`` limits the
    number of randomly chosen coordinates per tensor; ``analytic`` replaces
    the autograd gradient of selected parameters (fault injection).
    """
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    grads = {n: (torch.zeros_like(t) if g is None else g.detach())
             for n, t, g in zip(names, tensors, grads)}
    if analytic:
        grads.update({n: torch.as_tensor(g) for n, g in analytic.items()})
    rng = np.random.default_rng(seed)
    per_param, failing, checked = {}, [], 0
    with torch.no_grad():
        for name, p in zip(names, tensors):
            flat = p.view(-1)
            gflat = grads[name].reshape(-1)
            n = flat.numel()
            idx = np.arange(n) if max_coords is None or n <= max_coords else \
                np.sort(rng.choice(n, size=max_coords, replace=False))
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(loss_fn())
                flat[i] = orig - eps
                fm = float(loss_fn())
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = float(gflat[i])
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), abs_floor))
            checked += len(idx)
            per_param[name] = worst
            if worst >= tolerance:
                failing.append(name)
    return GradCheckReport(max(per_param.values(), default=0.0), failing, per_param, checked)


def toy_decoder_problem(config: Optional[DecoderConfig] = None, K=3, side=64, batch=1, seed=0,
                        dtype=torch.float64):
    """Small random decoder instance for gradient verification.

    Returns ``(decoder, loss_fn)`` where ``loss_fn()`` evaluates
    bce_loss(decode(...)) on fixed random inputs.
    """
    # every width stays at or below 8; the encoder reduction is lowered to 8
    # so that D_j = 8 still yields one injected channel
    cfg = config or DecoderConfig(hidden_dims=(8, 8, 8), d_F=8, guidance_channels=2,
                                  scale_dims={2: 8, 3: 8, 4: 8}, encoder_reduction=8, mlp_ratio=1)
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        decoder = CostVolumeGuidedDecoder(cfg).to(dtype)
    s5 = side // 32
    F_emb = torch.randn(batch, s5, s5, K, cfg.d_F, generator=gen, dtype=dtype)
    Ej = {j: torch.randn(batch, side >> j, side >> j, cfg.scale_dims[j], generator=gen, dtype=dtype)
          for j in (2, 3, 4)}
    guides = {j: torch.rand(batch, side >> j, side >> j, K, cfg.guidance_channels,
                            generator=gen, dtype=dtype) * 2 - 1 for j in cfg.guidance_scales}
    target = torch.randint(0, K, (batch, side, side), generator=gen)

    def loss_fn():
        return bce_loss(decoder(F_emb, Ej, guides), target)

    return decoder, loss_fn
