"""Figures written next to run and ablation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (6.4, 4.0)


def plot_losses(report, path) -> Path:
    """Per-epoch loss curves of both stages on one log-scaled axis."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    n_pre = len(report.pretrain_losses)
    if n_pre:
        ax.plot(range(1, n_pre + 1), report.pretrain_losses, label="pretrain (negatives)")
    if report.train_losses:
        xs = range(n_pre + 1, n_pre + len(report.train_losses) + 1)
        ax.plot(xs, report.train_losses, label="train")
        ax.plot(xs, report.val_losses, ls="--", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (normalized)")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_ablation(rows, path) -> Path:
    names = [r["config"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(FIGSIZE[0] * 1.5, FIGSIZE[1]))
    for ax, key in zip(axes, ("mse", "mae")):
        ax.bar(range(len(rows)), [r[key] for r in rows], color="0.45")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel(key.upper())
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
