"""Report figures, rendered headless to PNG files next to the data files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_travel_time_bars(rows: list[dict], path: str) -> None:
    """Mean ATT per method with a std whisker; one bar per report row."""
    labels = [row["method"] for row in rows]
    means = [row["att_mean"] for row in rows]
    stds = [row["att_std"] for row in rows]
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(rows)), 4))
    ax.bar(range(len(rows)), means, yerr=stds, capsize=4, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("average travel time (s)")
    ax.set_title("Closed-loop travel time by controller")
    ax.grid(True, axis="y", alpha=0.4)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_curve(steps: list[dict], epochs: list[dict], path: str) -> None:
    """Per-step loss (light) with the per-epoch mean on top."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if steps:
        ax.plot([row["step"] for row in steps], [row["loss"] for row in steps],
                alpha=0.3, label="step loss", color="tab:blue")
    if epochs:
        per_epoch = [row["loss"] for row in epochs]
        spacing = max(len(steps), 1) / max(len(epochs), 1)
        centers = [(index + 1) * spacing for index in range(len(epochs))]
        ax.plot(centers, per_epoch, marker="o", label="epoch mean",
                color="tab:orange")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("cross-entropy")
    ax.set_title("Training loss")
    if steps or epochs:
        ax.legend()
    ax.grid(True, alpha=0.4)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_attention_bars(rows: list[dict], path: str) -> None:
    """Mean attention mass per hop class, with a std whisker where defined."""
    labels = [row["class"] for row in rows]
    means = [row["mean"] for row in rows]
    stds = [0.0 if np.isnan(row["std"]) else row["std"] for row in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(rows)), means, yerr=stds, capsize=4, color="tab:green")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels)
    ax.set_ylabel("mean attention weight")
    ax.set_title("Graph attention by neighborhood class")
    ax.grid(True, axis="y", alpha=0.4)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
