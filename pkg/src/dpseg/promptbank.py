"""Category and template metadata, prompt embeddings and their providers."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .container import load_container, save_container
from .errors import (DimensionError, EmptyBankError, InvalidConfigError,
                     MalformedTemplateError)

PLACEHOLDER = "{}"
PROMPT_SCALES = (2, 3, 4)

# Hand-written phrasings in the style of CLIP prompt ensembles.
DEFAULT_TEMPLATES = (
    "a photo of a {}.",
    "a {} in the scene.",
    "a photo of many {}.",
    "a close-up photo of a {}.",
    "a cropped photo of the {}.",
    "a bright photo of a {}.",
    "a dark photo of the {}.",
    "a photo of a small {}.",
    "a photo of a large {}.",
    "there is a {} in the scene.",
    "a blurry photo of a {}.",
    "a good photo of the {}.",
    "a rendering of a {}.",
    "a photo of the {} texture.",
    "a low resolution photo of a {}.",
    "itap of a {}.",
    "a jpeg corrupted photo of the {}.",
    "a photo of one {}.",
    "the {} in the picture.",
    "a segment of {}.",
)


@dataclass(frozen=True)
class TemplateBank:
    templates: tuple

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.templates:
            raise EmptyBankError("template bank is empty")
        seen = set()
        for i, t in enumerate(self.templates, start=1):
            if t.count(PLACEHOLDER) != 1:
                raise MalformedTemplateError(
                    f"template {i} must contain exactly one '{PLACEHOLDER}': {t!r}", line=i)
            if t in seen:
                raise MalformedTemplateError(f"template {i} is a duplicate: {t!r}", line=i)
            seen.add(t)

    @property
    def M(self) -> int:
        return len(self.templates)

    @classmethod
    def default(cls, m: int = 4) -> "TemplateBank":
        if not 1 <= m <= len(DEFAULT_TEMPLATES):
            raise InvalidConfigError(f"default bank holds 1..{len(DEFAULT_TEMPLATES)} templates, got {m}")
        return cls(DEFAULT_TEMPLATES[:m])


@dataclass(frozen=True)
class CategorySet:
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise EmptyBankError("category set is empty")
        if any(not n for n in self.names):
            raise InvalidConfigError("category names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise InvalidConfigError("category names must be unique")

    @property
    def K(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise InvalidConfigError(f"unknown category {name!r}") from None


def _read_lines(path):
    text = Path(path).read_text(encoding="utf-8")
    return [(i, line.rstrip("\r\n")) for i, line in enumerate(text.splitlines(), start=1)
            if line.strip()]


def load_template_bank(path) -> TemplateBank:
    """Read one template per line; blank lines are skipped.

    Line numbers in errors refer to the physical line in the file.
    """
    lines = _read_lines(path)
    if not lines:
        raise EmptyBankError(f"{path}: no templates")
    for lineno, line in lines:
        if line.count(PLACEHOLDER) != 1:
            raise MalformedTemplateError(
                f"{path}:{lineno}: expected exactly one '{PLACEHOLDER}' placeholder", line=lineno)
    try:
        return TemplateBank([line for _, line in lines])
    except MalformedTemplateError as exc:
        lineno = lines[exc.line - 1][0]
        raise MalformedTemplateError(f"{path}:{lineno}: duplicate template", line=lineno) from None


def load_category_set(path) -> CategorySet:
    lines = _read_lines(path)
    if not lines:
        raise EmptyBankError(f"{path}: no categories")
    return CategorySet([line.strip() for _, line in lines])


def render_prompts(bank: TemplateBank, cats: CategorySet) -> list:
    """All K*M descriptions, category-major: ``out[k*M + m]``."""
    return [t.replace(PLACEHOLDER, name) for name in cats.names for t in bank.templates]


@dataclass(frozen=True)
class PromptDims:
    """Embedding sizes. ``prompt_size`` is the side of the prompt image the
    multi-scale maps are derived from; scale j has side ``prompt_size / 2**j``."""

    d_z: int = 64
    scale_dims: Dict[int, int] = field(default_factory=lambda: {2: 16, 3: 32, 4: 64})
    prompt_size: int = 64

    def __post_init__(self):
        if self.d_z <= 0 or self.prompt_size <= 0:
            raise InvalidConfigError("dimensions must be positive")
        if set(self.scale_dims) != set(PROMPT_SCALES):
            raise InvalidConfigError(f"scale_dims must cover scales {PROMPT_SCALES}")
        if any(d <= 0 for d in self.scale_dims.values()):
            raise InvalidConfigError("dimensions must be positive")
        if self.prompt_size % 2 ** max(PROMPT_SCALES):
            raise InvalidConfigError("prompt_size must be divisible by 16")

    def side(self, j: int) -> int:
        return self.prompt_size // 2 ** j


@dataclass
class PromptEmbeddings:
    """Text prompts ``T`` and visual prompts ``V`` of shape (K, M, D_z) plus
    visual prompt feature maps ``Vj[j]`` of shape (K, M, Hp_j, Wp_j, D_j)."""

    T: np.ndarray
    V: np.ndarray
    Vj: Dict[int, np.ndarray]

    def __post_init__(self):
        self.T = np.asarray(self.T)
        self.V = np.asarray(self.V)
        self.Vj = {int(j): np.asarray(v) for j, v in self.Vj.items()}
        self.validate()

    @property
    def K(self) -> int:
        return self.T.shape[0]

    @property
    def M(self) -> int:
        return self.T.shape[1]

    def validate(self):
        if self.T.ndim != 3 or self.T.shape != self.V.shape:
            raise DimensionError(f"T {self.T.shape} and V {self.V.shape} must both be (K, M, D_z)")
        for name, arr in (("T", self.T), ("V", self.V)):
            if not np.all(np.linalg.norm(arr, axis=-1) > 0):
                raise DimensionError(f"{name} holds a zero-norm prompt vector")
        prev = None
        for j in sorted(self.Vj):
            v = self.Vj[j]
            if v.ndim != 5 or v.shape[:2] != self.T.shape[:2]:
                raise DimensionError(f"V{j} must be (K, M, Hp, Wp, D_j), got {v.shape}")
            if prev is not None and (prev[0] != 2 * v.shape[2] or prev[1] != 2 * v.shape[3]):
                raise DimensionError("prompt feature maps must halve at each scale")
            prev = v.shape[2:4]

    def copy(self) -> "PromptEmbeddings":
        return PromptEmbeddings(self.T.copy(), self.V.copy(), {j: v.copy() for j, v in self.Vj.items()})

    def to_arrays(self) -> dict:
        out = {"T": self.T, "V": self.V}
        out.update({f"V{j}": v for j, v in self.Vj.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays, prefix="") -> "PromptEmbeddings":
        vj = {}
        for j in PROMPT_SCALES:
            key = f"{prefix}V{j}"
            if key in arrays:
                vj[j] = arrays[key]
        return cls(arrays[prefix + "T"], arrays[prefix + "V"], vj)

    def equals(self, other: "PromptEmbeddings") -> bool:
        return (np.array_equal(self.T, other.T) and np.array_equal(self.V, other.V)
                and self.Vj.keys() == other.Vj.keys()
                and all(np.array_equal(self.Vj[j], other.Vj[j]) for j in self.Vj))


def _unit(x, axis=-1):
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


def _mix(latent, noise, weight):
    """Unit vector with mixing weight ``weight`` on ``latent``."""
    return _unit(weight * latent + np.sqrt(max(0.0, 1.0 - weight ** 2)) * _unit(noise))


def synthetic_prompt_provider(seed: int, cats: CategorySet, bank: TemplateBank,
                              dims: Optional[PromptDims] = None, correlation: float = 0.9,
                              text_correlation: Optional[float] = None,
                              noise_scale: float = 0.01,
                              latents: Optional[np.ndarray] = None) -> PromptEmbeddings:
    """Seeded stand-in for the text and visual prompt encoders.

    Every category owns a unit latent. ``V[k, m]`` mixes the latent with
    weight ``correlation``, ``T[k, m]`` with ``text_correlation`` (default
    half of it), each against independent noise, so visual prompts sit
    closer to same-category image features than text prompts do. ``Vj``
    maps are spatially constant projections of ``V`` plus ``noise_scale``
    Gaussian jitter. ``latents`` (K, D_z) overrides the seeded latents.
    """
    dims = dims or PromptDims()
    if not 0.0 <= correlation <= 1.0:
        raise InvalidConfigError("correlation must lie in [0, 1]")
    if text_correlation is None:
        text_correlation = 0.5 * correlation
    if not 0.0 <= text_correlation <= 1.0 or (correlation > 0 and text_correlation >= correlation):
        raise InvalidConfigError("text_correlation must lie in [0, correlation)")
    if noise_scale < 0:
        raise InvalidConfigError("noise_scale must be non-negative")
    K, M, D = cats.K, bank.M, dims.d_z
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]
    seeded = _unit(streams[0].standard_normal((K, D)))
    if latents is None:
        latents = seeded
    else:
        latents = np.asarray(latents, dtype=np.float64)
        if latents.shape != (K, D):
            raise DimensionError(f"latents must be {(K, D)}, got {latents.shape}")
        latents = _unit(latents)
    lat = latents[:, None, :]
    T = _mix(lat, streams[1].standard_normal((K, M, D)), text_correlation)
    V = _mix(lat, streams[2].standard_normal((K, M, D)), correlation)
    Vj = {}
    for j in PROMPT_SCALES:
        dj, side = dims.scale_dims[j], dims.side(j)
        proj = streams[3].standard_normal((D, dj)) / np.sqrt(D)
        base = (V @ proj)[:, :, None, None, :]
        jitter = noise_scale * streams[4].standard_normal((K, M, side, side, dj))
        Vj[j] = (np.broadcast_to(base, jitter.shape) + jitter).astype(np.float32)
    return PromptEmbeddings(T.astype(np.float32), V.astype(np.float32), Vj)


def add_prompt_noise(p: PromptEmbeddings, level: float, seed: int) -> PromptEmbeddings:
    """Gaussian corruption of the visual prompts only.

    Noise variance is ``level`` times the tensor's own empirical variance,
    applied independently to ``V`` and to each ``Vj`` map. ``T`` is copied
    through untouched.
    """
    if not 0.0 <= level <= 1.0:
        raise InvalidConfigError(f"noise level must lie in [0, 1], got {level}")
    if level == 0.0:
        return p.copy()
    rng = np.random.default_rng(seed)

    def noisy(x):
        std = np.sqrt(level * x.var(dtype=np.float64))
        return (x + std * rng.standard_normal(x.shape)).astype(x.dtype)

    return PromptEmbeddings(p.T.copy(), noisy(p.V), {j: noisy(p.Vj[j]) for j in sorted(p.Vj)})


def save_prompt_embeddings(p: PromptEmbeddings, path, provenance="dpseg prompt embeddings"):
    save_container(p.to_arrays(), path, provenance=provenance)


def load_prompt_embeddings(path) -> PromptEmbeddings:
    """Cached-container provider: embeddings exported offline, used as stored."""
    return PromptEmbeddings.from_arrays(load_container(path))
