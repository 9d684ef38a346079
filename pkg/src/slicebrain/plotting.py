"""Static figures written next to the CSV/JSON reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import METRICS, EvalReport  # noqa: E402

_SPLIT_TITLES = {"normal_test": "Normal", "challenging_test": "Challenging", "train": "Train"}
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)


def boxplot_figure(reports: list[EvalReport], path) -> None:
    """One panel per split; grouped boxes per metric, one box per method."""
    splits = sorted({s for r in reports for s in r.splits()}, key=lambda s: list(_SPLIT_TITLES).index(s) if s in _SPLIT_TITLES else 99)
    fig, axes = plt.subplots(1, len(splits), figsize=(4.5 * len(splits), 3.6), squeeze=False)
    width = 0.8 / max(1, len(reports))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for ax, split in zip(axes[0], splits):
        for j, rep in enumerate(reports):
            data, pos = [], []
            for i, m in enumerate(METRICS):
                vals = [getattr(r, m) for r in rep.rows if r.split == split and getattr(r, m) is not None]
                data.append(vals or [np.nan])
                pos.append(i + (j - (len(reports) - 1) / 2) * width)
            bp = ax.boxplot(data, positions=pos, widths=width * 0.9, patch_artist=True, manage_ticks=False)
            for box in bp["boxes"]:
                box.set_facecolor(colors[j % len(colors)])
                box.set_alpha(0.6)
            ax.plot([], [], color=colors[j % len(colors)], lw=6, alpha=0.6, label=rep.method)
        ax.set_xticks(range(len(METRICS)))
        ax.set_xticklabels([m.capitalize() for m in METRICS])
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(_SPLIT_TITLES.get(split, split))
        ax.grid(axis="y", alpha=0.3)
    axes[0][0].legend(loc="lower left", fontsize=8)
    _save(fig, path)


def loss_curve(history, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(history.steps, history.losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("weighted cross-entropy")
    ax.set_yscale("log")
    if history.val_dice:
        ax2 = ax.twinx()
        per_epoch = len(history.steps) / max(1, len(history.epoch_loss))
        ax2.plot([per_epoch * (i + 1) for i in range(len(history.val_dice))], history.val_dice, "o-", color="C1", ms=3)
        ax2.set_ylabel("validation Dice", color="C1")
        ax2.set_ylim(0, 1)
    _save(fig, path)


def overlay_figure(stack, pred, truth=None, path=None, slices=None, n=4) -> None:
    """Predicted (red) and reference (green) contours over a few slices."""
    d = stack.n_slices
    if slices is None:
        slices = np.linspace(0, d - 1, n + 2)[1:-1].round().astype(int)
    fig, axes = plt.subplots(1, len(slices), figsize=(2.6 * len(slices), 2.8), squeeze=False)
    for ax, k in zip(axes[0], slices):
        ax.imshow(stack.slice(k), cmap="gray")
        ax.contour(pred.labels[:, :, k], levels=[0.5], colors="r", linewidths=0.8)
        if truth is not None:
            ax.contour(truth.labels[:, :, k], levels=[0.5], colors="lime", linewidths=0.8, linestyles="--")
        ax.set_title(f"slice {k}", fontsize=9)
        ax.axis("off")
    _save(fig, path)
