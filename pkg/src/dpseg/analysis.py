"""Modality-gap statistics, embedding distances and per-category
similarity heatmaps."""
from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .costvolume import compute_cost_volume
from .errors import DegenerateVectorError, DimensionError, InvalidConfigError
from .promptbank import CategorySet, PromptDims, TemplateBank, _mix, _unit, synthetic_prompt_provider

DISTANCE_DEFINITION = "cosine distance d = 1 - cos(a, b)"
HEATMAP_MODES = ("text", "visual", "dual")


def _cos(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"vector shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise DegenerateVectorError("zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class GapReport:
    per_sample: list                 # dicts: id, cos_ET, cos_EV, cos_ER (+ optional category)
    summary: dict
    excluded: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"per_sample": self.per_sample, "summary": self.summary, "excluded": self.excluded}

    def write_csv(self, path):
        keys = ["id", "category", "cos_ET", "cos_EV", "cos_ER"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            for row in self.per_sample:
                w.writerow({k: row.get(k, "") for k in keys})


def modality_gap_experiment(samples: Sequence, ids: Optional[Sequence] = None,
                            categories: Optional[Sequence] = None) -> GapReport:
    """Cosine similarity of each image embedding E to its text prompt T,
    visual prompt V and dual prompt R = (T + V) / 2.

    Samples with a degenerate vector are excluded and listed in the summary.
    Win-rate is the fraction of kept samples with cos(E, V) > cos(E, T).
    """
    samples = list(samples)
    if not samples:
        raise InvalidConfigError("need at least one sample")
    ids = list(range(len(samples))) if ids is None else list(ids)
    rows, excluded = [], []
    for i, (E, T, V) in enumerate(samples):
        try:
            R = (np.asarray(T, np.float64) + np.asarray(V, np.float64)) / 2
            row = {"id": ids[i], "cos_ET": _cos(E, T), "cos_EV": _cos(E, V), "cos_ER": _cos(E, R)}
        except DegenerateVectorError:
            excluded.append(ids[i])
            continue
        if categories is not None:
            row["category"] = categories[i]
        rows.append(row)
    rows.sort(key=lambda r: r["id"])
    excluded.sort()
    summary = {"n": len(rows), "n_excluded": len(excluded)}
    for key in ("cos_ET", "cos_EV", "cos_ER"):
        vals = [r[key] for r in rows]
        summary[f"mean_{key}"] = statistics.fmean(vals) if vals else math.nan
        summary[f"median_{key}"] = statistics.median(vals) if vals else math.nan
    wins = sum(r["cos_EV"] > r["cos_ET"] for r in rows)
    summary["win_rate"] = wins / len(rows) if rows else math.nan
    return GapReport(rows, summary, excluded)


def synthetic_gap_samples(n=200, seed=0, K=10, d_z=64, correlation=0.9, text_correlation=0.5,
                          image_correlation=0.9):
    """``n`` (E, T, V) triples whose image embeddings share their category's
    latent. Returns (samples, ids, category names)."""
    cats = CategorySet([f"class{k}" for k in range(K)])
    bank = TemplateBank.default(4)
    dims = PromptDims(d_z=d_z)
    rng = np.random.default_rng([seed, 1])
    latents = _unit(rng.standard_normal((K, d_z)))
    p = synthetic_prompt_provider(seed, cats, bank, dims, correlation, text_correlation, latents=latents)
    samples, names = [], []
    for _ in range(n):
        k, m = int(rng.integers(K)), int(rng.integers(bank.M))
        E = _mix(latents[k], rng.standard_normal(d_z), image_correlation)
        samples.append((E, p.T[k, m], p.V[k, m]))
        names.append(cats.names[k])
    return samples, list(range(n)), names


def embedding_distance_report(E, T, V):
    """Cosine distance from E to each prompt mode, nearest first."""
    R = (np.asarray(T, np.float64) + np.asarray(V, np.float64)) / 2
    dist = [("text", 1 - _cos(E, T)), ("visual", 1 - _cos(E, V)), ("dual", 1 - _cos(E, R))]
    return sorted(dist, key=lambda kv: kv[1])


@dataclass
class Heatmap:
    values: np.ndarray   # (H, W) in [-1, 1]
    category: Optional[str]
    mode: str


def _pool(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 2:
        p = p.mean(axis=0)
    if p.ndim != 1:
        raise DimensionError(f"prompt embedding must be (D,) or (M, D), got {p.shape}")
    return p


def cost_volume_heatmap(feature_map, prompt_embedding, mode="visual", category=None) -> Heatmap:
    """Per-pixel cosine similarity between a feature map (H, W, D) and one
    category's prompt.

    For ``text``/``visual`` mode ``prompt_embedding`` is (D,) or (M, D)
    (mean-pooled over M). For ``dual`` it is a pair (T, V) and the pooled
    (T + V) / 2 is used.
    """
    if mode not in HEATMAP_MODES:
        raise InvalidConfigError(f"mode must be one of {HEATMAP_MODES}")
    if mode == "dual":
        t, v = prompt_embedding
        ref = (_pool(t) + _pool(v)) / 2
    else:
        ref = _pool(prompt_embedding)
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3:
        raise DimensionError(f"feature map must be (H, W, D), got {fm.shape}")
    if np.linalg.norm(ref) < 1e-12:
        raise DegenerateVectorError("pooled prompt vector has zero norm")
    grid = compute_cost_volume(fm, ref[None, None, :]).numpy()[..., 0, 0]
    return Heatmap(grid, category, mode)


def heatmap_to_gray(values):
    """Affine [-1, 1] -> [0, 255], rounding half up."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return np.floor((v + 1.0) * 127.5 + 0.5).astype(np.uint8)


def export_heatmap(h: Heatmap, path, format="pgm"):
    path = Path(path)
    try:
        if format == "pgm":
            gray = heatmap_to_gray(h.values)
            H, W = gray.shape
            with open(path, "wb") as fh:
                fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
                fh.write(gray.tobytes())
        elif format == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                for row in np.asarray(h.values, dtype=np.float64):
                    w.writerow([repr(float(x)) for x in row])
        else:
            raise InvalidConfigError(f"unknown heatmap format {format!r}")
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {path}: {exc}") from exc


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    W, H = int(fields[1]), int(fields[2])
    pos += 1   # single whitespace byte before the raster
    return np.frombuffer(raw[pos:pos + W * H], dtype=np.uint8).reshape(H, W)


def read_heatmap_csv(path):
    with open(path, newline="") as fh:
        return np.array([[float(x) for x in row] for row in csv.reader(fh)])
