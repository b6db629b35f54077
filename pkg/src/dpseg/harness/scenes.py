"""Seeded synthetic scenes of textured geometric primitives.

Each class owns a fixed colour and texture family, so a prompt image of a
class is informative about that class wherever it appears. Class 0 is the
background.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from ..errors import GenerationError, InvalidConfigError

SHAPES = ("rect", "disc", "triangle")
TEXTURES = ("flat", "hstripes", "vstripes", "checker", "diag", "dots")
SMALL_AREA_FRACTION = 0.01
_MAX_TRIES = 200


@dataclass
class SyntheticScene:
    image: np.ndarray          # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray         # (H, W) int64
    meta: list = field(default_factory=list)


@dataclass(frozen=True)
class ClassStyle:
    color: tuple
    accent: tuple
    texture: str
    period: int


def class_styles(K):
    """Appearance family of every class. Independent of any seed."""
    styles = [ClassStyle((0.45, 0.45, 0.42), (0.35, 0.36, 0.38), "dots", 3)]
    for k in range(1, K):
        hue = (k - 1) / max(K - 1, 1)
        color = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
        accent = colorsys.hsv_to_rgb((hue + 0.08) % 1.0, 0.6, 0.45)
        texture = TEXTURES[(k - 1) % len(TEXTURES)]
        styles.append(ClassStyle(tuple(color), tuple(accent), texture, 2 + (k - 1) % 3))
    return styles


def texture(style: ClassStyle, H, W, rng, brightness=1.0):
    """Full-canvas (H, W, 3) rendering of one class's appearance."""
    y, x = np.mgrid[0:H, 0:W]
    y = y + rng.integers(0, 8)
    x = x + rng.integers(0, 8)
    p = style.period
    if style.texture == "flat":
        pattern = np.zeros((H, W))
    elif style.texture == "hstripes":
        pattern = (y // p) % 2
    elif style.texture == "vstripes":
        pattern = (x // p) % 2
    elif style.texture == "checker":
        pattern = (x // p + y // p) % 2
    elif style.texture == "diag":
        pattern = ((x + y) // p) % 2
    else:
        pattern = rng.random((H, W)) < 0.3
    pattern = pattern.astype(np.float64)[..., None]
    img = (1 - pattern) * np.asarray(style.color) + pattern * np.asarray(style.accent)
    return img * brightness


def shape_mask(kind, H, W, cy, cx, r, rng=None):
    y, x = np.mgrid[0:H, 0:W]
    if kind == "rect":
        return (np.abs(y - cy) <= r) & (np.abs(x - cx) <= r * 0.8)
    if kind == "disc":
        return (y - cy) ** 2 + (x - cx) ** 2 <= r * r
    if kind == "triangle":
        # upward triangle: apex at (cy - r, cx), base on row cy + r
        inside_rows = (y >= cy - r) & (y <= cy + r)
        half = (y - (cy - r)) * 0.6
        return inside_rows & (np.abs(x - cx) <= half)
    raise InvalidConfigError(f"unknown shape {kind!r}")


def generate_scene(seed, K, grid=(64, 64), shapes_per_scene=(2, 5), noise=0.03) -> SyntheticScene:
    """Render one scene.

    Objects cycle through a seeded permutation of the foreground classes so
    that classes are balanced across seeds. When any object is drawn, the
    last one is small (area below 1% of the image) and placed on background.
    """
    if K < 2:
        raise InvalidConfigError("need at least two classes (background + one object)")
    H, W = grid
    if H % 32 or W % 32:
        raise InvalidConfigError("scene sides must be multiples of 32")
    lo, hi = shapes_per_scene
    if lo < 0 or hi < lo:
        raise InvalidConfigError("invalid shapes-per-scene range")
    rng = np.random.default_rng(seed)
    styles = class_styles(K)
    image = texture(styles[0], H, W, rng, brightness=rng.uniform(0.85, 1.15))
    labels = np.zeros((H, W), dtype=np.int64)
    n = int(rng.integers(lo, hi + 1))
    order = rng.permutation(np.arange(1, K))
    offset = int(rng.integers(0, K - 1))
    meta = []
    side = min(H, W)
    for i in range(n):
        k = int(order[(offset + i) % (K - 1)])
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        small = i == n - 1
        for _ in range(_MAX_TRIES):
            if small:
                r = float(rng.uniform(2.0, 3.0))
            else:
                r = float(rng.uniform(0.1, 0.25) * side)
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            mask = shape_mask(kind, H, W, cy, cx, r)
            area = int(mask.sum())
            if area == 0:
                continue
            if small:
                if area >= SMALL_AREA_FRACTION * H * W or labels[mask].any():
                    continue
            break
        else:
            raise GenerationError(f"could not place object {i} of scene {seed} after {_MAX_TRIES} tries")
        tex = texture(styles[k], H, W, rng, brightness=rng.uniform(0.85, 1.15))
        image[mask] = tex[mask]
        labels[mask] = k
        meta.append({"class": k, "shape": kind, "center": (float(cy), float(cx)),
                     "radius": r, "area": area, "small": small})
    image = image + noise * rng.standard_normal(image.shape)
    return SyntheticScene(np.clip(image, 0, 1).astype(np.float32), labels, meta)


def generate_prompt_image(k, m, K, size=64, seed=0):
    """Exemplar image for class ``k`` under template ``m`` on a black canvas.

    The background class fills the whole canvas. Variation across ``m``
    (shape kind, scale, position, brightness, texture phase) stands in for
    the diversity of generated prompt images.
    """
    rng = np.random.default_rng([seed, k, m])
    style = class_styles(K)[k]
    img = texture(style, size, size, rng, brightness=rng.uniform(0.8, 1.2))
    if k == 0:
        out = img
    else:
        kind = SHAPES[m % len(SHAPES)]
        r = rng.uniform(0.3, 0.45) * size
        c = size / 2 + rng.uniform(-0.08, 0.08, size=2) * size
        mask = shape_mask(kind, size, size, c[0], c[1], r)
        out = np.where(mask[..., None], img, 0.0)
    out = out + 0.03 * rng.standard_normal(out.shape)
    return np.clip(out, 0, 1).astype(np.float32)
