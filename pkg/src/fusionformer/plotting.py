"""Figures for training runs and evaluations, rendered straight to image files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.figure import Figure


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    return path


def training_curves(epochs: Sequence[int], train_loss: Sequence[float], val_mpjpe: Sequence[float],
                    lr: Sequence[float], path) -> Path:
    fig = Figure(figsize=(9, 3.2))
    ax_loss, ax_err, ax_lr = fig.subplots(1, 3)
    ax_loss.plot(epochs, train_loss, marker="o", ms=3)
    ax_loss.set(xlabel="epoch", ylabel="train loss", yscale="log")
    ax_err.plot(epochs, val_mpjpe, marker="o", ms=3, color="tab:red")
    ax_err.set(xlabel="epoch", ylabel="val MPJPE")
    ax_lr.step(epochs, lr, where="post", color="tab:gray")
    ax_lr.set(xlabel="epoch", ylabel="learning rate")
    for ax in (ax_loss, ax_err, ax_lr):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def attention_heatmap(weights: np.ndarray, joint_names: Sequence[str], path, title: str = "") -> Path:
    """Rows are queries, columns keys."""
    n = len(joint_names)
    fig = Figure(figsize=(1.2 + 0.45 * n, 1.0 + 0.4 * n))
    ax = fig.subplots()
    im = ax.imshow(weights, cmap="viridis", vmin=0.0, vmax=max(float(np.max(weights)), 1e-12))
    ax.set_xticks(range(n), joint_names, rotation=90, fontsize=7)
    ax.set_yticks(range(n), joint_names, fontsize=7)
    ax.set(xlabel="key", ylabel="query", title=title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def joint_errors(errors: np.ndarray, joint_names: Sequence[str], path, unit: str = "mm") -> Path:
    fig = Figure(figsize=(1.5 + 0.4 * len(joint_names), 3.2))
    ax = fig.subplots()
    ax.bar(range(len(joint_names)), errors, color="tab:blue")
    ax.axhline(float(np.mean(errors)), color="k", lw=0.8, ls="--", label="mean")
    ax.set_xticks(range(len(joint_names)), joint_names, rotation=60, ha="right", fontsize=8)
    ax.set(ylabel=f"root-relative error ({unit})")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)
