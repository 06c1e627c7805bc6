"""Matplotlib figures written straight to files (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed metadata keeps reruns byte-identical.
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_loss_curve(history, path, title: str = "pre-training loss") -> Path:
    """Per-epoch mean loss on a log axis, learning rate on a twin axis."""
    epochs = [h[0] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h[1] for h in history], color="tab:blue", label="mean loss")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    lr_ax = ax.twinx()
    lr_ax.plot(epochs, [h[2] for h in history], color="tab:gray", linestyle="--", label="lr")
    lr_ax.set_ylabel("learning rate")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(report, path, title: str = "ablation") -> Path:
    """Grouped bars of full-split and 1-shot probe accuracy per setting."""
    labels = [r.setting for r in report.rows]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(labels) + 2), 4))
    ax.bar(x - 0.2, [r.probe_accuracy for r in report.rows], 0.4, label="probe")
    ax.bar(x + 0.2, [r.fewshot_accuracy for r in report.rows], 0.4, label="1-shot probe")
    ax.set_xticks(x, labels)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("validation accuracy")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_clouds(panels, path, title: str | None = None) -> Path:
    """Side-by-side 3D scatter plots; ``panels`` is a list of (caption, points)."""
    fig = plt.figure(figsize=(3.2 * len(panels), 3.4))
    for i, (caption, pts) in enumerate(panels, start=1):
        ax = fig.add_subplot(1, len(panels), i, projection="3d")
        pts = np.asarray(pts)
        ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], s=3, c=pts[:, 2], cmap="viridis")
        ax.set_title(caption)
        ax.set_box_aspect((1, 1, 1))
        for lim in (ax.set_xlim, ax.set_ylim, ax.set_zlim):
            lim(-1, 1)
        ax.set_axis_off()
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_schedule(schedule, path) -> Path:
    t = np.arange(1, schedule.T + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, schedule.beta[1:], label="beta")
    ax.plot(t, schedule.alpha_bar[1:], label="alpha_bar")
    ax.plot(t[1:], schedule.beta_tilde[2:], label="beta_tilde", linestyle=":")
    ax.set_xlabel("t")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
