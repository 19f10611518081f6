"""Matplotlib figures written next to a run's metrics CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _num(v):
    if v is None or v == "":
        return np.nan
    return float(v)


def plot_training_curves(rows, path, title: str = "") -> Path:
    """Loss (log scale) against iteration, with stage boundaries marked and
    validation PSNR on a second axis when present."""
    it = np.array([_num(r["iteration"]) for r in rows])
    loss = np.array([_num(r["loss"]) for r in rows])
    val = np.array([_num(r.get("psnr_db")) for r in rows])
    stage = [str(r["stage"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ok = np.isfinite(loss) & (loss > 0)
    ax.semilogy(it[ok], loss[ok], color="tab:blue", lw=1.2, label="training loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    for i in range(1, len(rows)):
        if stage[i] != stage[i - 1]:
            ax.axvline(it[i - 1], color="0.75", lw=0.8, ls="--")
    if np.isfinite(val).any():
        ax2 = ax.twinx()
        m = np.isfinite(val)
        ax2.plot(it[m], val[m], "o-", color="tab:red", ms=4, label="PSNR (dB)")
        ax2.set_ylabel("PSNR (dB)")
    ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_image_grid(panels, path, title: str = "", cols: int | None = None) -> Path:
    """Side-by-side images; ``panels`` is a list of ``(label, HxWx{1,3} array)``."""
    n = len(panels)
    cols = cols or n
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows + 0.4), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (label, img) in zip(axes.ravel(), panels):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 3 and img.shape[2] == 1:
            img = img[..., 0]
        if img.ndim == 2:
            ax.imshow(img, cmap="viridis")
        else:
            ax.imshow(np.clip(img, 0.0, 1.0), interpolation="nearest")
        ax.set_title(label, fontsize=9)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def depth_preview(depth) -> np.ndarray:
    """Normalized depth for display; misses are NaN (blank)."""
    depth = np.asarray(depth, dtype=np.float64)
    hit = np.isfinite(depth)
    out = np.full(depth.shape, np.nan)
    if hit.any():
        lo, hi = depth[hit].min(), depth[hit].max()
        out[hit] = (depth[hit] - lo) / (hi - lo) if hi > lo else 0.0
    return out
