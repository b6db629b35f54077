"""Figures written next to the CSV/JSON reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_gap_report(report, path):
    """Per-sample cos(E,T) as dots and cos(E,V) as crosses."""
    rows = report.per_sample
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.scatter(x, [r["cos_ET"] for r in rows], s=10, c="tab:blue", marker="o", label="cos(E, T)")
    ax.scatter(x, [r["cos_EV"] for r in rows], s=14, c="tab:green", marker="x", label="cos(E, V)")
    ax.set_xlabel("sample")
    ax.set_ylabel("cosine similarity")
    ax.set_ylim(-1.05, 1.05)
    ax.legend(loc="lower right", frameon=False)
    return _save(fig, path)


def plot_heatmap(h, path):
    fig, ax = plt.subplots(figsize=(3.2, 3))
    im = ax.imshow(h.values, cmap="jet", vmin=-1, vmax=1, interpolation="nearest")
    ax.set_axis_off()
    title = f"{h.category} ({h.mode})" if h.category else h.mode
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_loss_curve(losses, path):
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(np.arange(len(losses)), losses, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("BCE loss")
    ax.set_yscale("log")
    return _save(fig, path)


def plot_ablation(result, path):
    names = [s.arm for s in result.summary]
    means = [s.mean for s in result.summary]
    errs = [s.stdev for s in result.summary]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3))
    ax.bar(np.arange(len(names)), means, yerr=errs, capsize=3, color="0.6")
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("mIoU")
    ax.set_title(result.axis)
    return _save(fig, path)


def plot_segmentation(image, labels_by_pass, path, K):
    """Image followed by one label panel per entry of ``labels_by_pass``."""
    n = 1 + len(labels_by_pass)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.3))
    axes[0].imshow(np.clip(image, 0, 1))
    axes[0].set_title("image")
    for ax, (name, labels) in zip(axes[1:], labels_by_pass.items()):
        ax.imshow(labels, cmap="tab10", vmin=0, vmax=max(K - 1, 9), interpolation="nearest")
        ax.set_title(name)
    for ax in axes:
        ax.set_axis_off()
    return _save(fig, path)
