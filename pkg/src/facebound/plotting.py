"""Report figures: CED curves, loss curves and landmark overlays.

Everything renders off-screen (Agg) straight to a file.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import ced_auc  # noqa: E402

plt.rcParams.update({"figure.dpi": 100, "savefig.bbox": "tight", "axes.grid": True, "grid.alpha": 0.3})


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_ced(curves: Mapping[str, Sequence[float]], tau_max: float, path: str | Path,
             resolution: int = 1000, title: str | None = None) -> Path:
    """One CED line per entry of ``curves`` (label -> per-image NMEs), AUC in the legend."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, nmes in curves.items():
        ced, auc = ced_auc(nmes, tau_max, resolution)
        ax.plot(ced[:, 0], ced[:, 1], drawstyle="steps-post", label=f"{label} (AUC {auc:.4f})")
    ax.set_xlim(0, tau_max)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("NME")
    ax.set_ylabel("fraction of images")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize="small")
    return _save(fig, path)


def plot_loss(histories: Mapping[str, Sequence[float]], path: str | Path, log_scale: bool = True) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, losses in histories.items():
        ax.plot(np.arange(len(losses)), losses, label=label)
    if log_scale:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.legend(fontsize="small")
    return _save(fig, path)


def plot_landmarks(image: np.ndarray, pred: np.ndarray, path: str | Path, gt: np.ndarray | None = None,
                   heatmap: np.ndarray | None = None) -> Path:
    """Overlay predicted (and optionally ground-truth) landmarks on an RGB image.

    ``heatmap`` (H x W, any resolution) is stretched over the image when given.
    """
    h, w = image.shape[:2]
    fig, ax = plt.subplots(figsize=(4, 4 * h / w))
    ax.imshow(image)
    if heatmap is not None:
        ax.imshow(heatmap, cmap="inferno", alpha=0.5, extent=(-0.5, w - 0.5, h - 0.5, -0.5), vmin=0, vmax=1)
    if gt is not None:
        ax.scatter(gt[:, 0], gt[:, 1], s=6, c="lime", label="ground truth")
    ax.scatter(pred[:, 0], pred[:, 1], s=6, c="red", label="prediction")
    ax.set_axis_off()
    if gt is not None:
        ax.legend(loc="lower right", fontsize="x-small")
    return _save(fig, path)
