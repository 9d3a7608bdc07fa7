"""Report figures (matplotlib, written straight to files)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def loss_curve(history, path, smooth=25):
    """Total loss per iteration (raw and running mean), one colour per phase."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    offset = 0
    for phase in sorted({h["phase"] for h in history}):
        y = np.array([h["loss"] for h in history if h["phase"] == phase])
        x = np.arange(len(y)) + offset
        ax.plot(x, y, lw=0.5, alpha=0.35)
        if len(y) >= smooth:
            k = np.ones(smooth) / smooth
            ax.plot(x[smooth - 1:], np.convolve(y, k, mode="valid"), lw=1.5, label=f"phase {phase}")
        offset += len(y)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    return _save(fig, path)


def metric_bars(variants, path):
    """Mean PSNR and SSIM per variant; ``variants`` maps name -> list of EvalRow."""
    names = list(variants)
    psnr = [np.mean([r.psnr for r in variants[n]]) for n in names]
    ssim = [np.mean([r.ssim for r in variants[n]]) for n in names]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    x = np.arange(len(names))
    axes[0].bar(x, psnr, color="tab:blue")
    axes[0].set_ylabel("PSNR (dB)")
    axes[0].set_ylim(min(psnr) - 2, max(psnr) + 1)
    axes[1].bar(x, ssim, color="tab:orange")
    axes[1].set_ylabel("SSIM")
    axes[1].set_ylim(max(0.0, min(ssim) - 0.05), 1.0)
    for ax in axes:
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20, ha="right")
    return _save(fig, path)


def render_panel(images, path):
    """Side-by-side images; ``images`` maps title -> (H, W, 3) or (H, W) array."""
    fig, axes = plt.subplots(1, len(images), figsize=(2.4 * len(images), 2.6))
    axes = np.atleast_1d(axes)
    for ax, (title, img) in zip(axes, images.items()):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            ax.imshow(img, cmap="viridis")
        else:
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    return _save(fig, path)


def error_histogram(values, path, xlabel, threshold=None):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(np.asarray(values).ravel(), bins=60, color="tab:gray")
    if threshold is not None:
        ax.axvline(threshold, color="tab:red", ls="--")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    return _save(fig, path)
