"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .geometry import TimeSpan  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def plot_training(rows: Sequence[dict[str, float]], path: str | os.PathLike) -> None:
    """Loss components (log scale) and train metrics per epoch."""
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_met) = plt.subplots(1, 2, figsize=(8, 3))
        for key in ("total", "answer", "spatial", "temporal"):
            ax_loss.plot(epochs, [max(r[key], 1e-8) for r in rows], label=key)
        ax_loss.set_yscale("log")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_loss.legend(frameon=False)
        for key, label in (("accuracy", "Acc"), ("temp_miou", "Temp. mIoU"), ("asa", "ASA")):
            ax_met.plot(epochs, [r[key] for r in rows], label=label)
        ax_met.set_ylim(-0.02, 1.02)
        ax_met.set_xlabel("epoch")
        ax_met.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def plot_spans(ids: Sequence[str], predicted: Sequence[TimeSpan], truth: Sequence[TimeSpan],
               correct: Sequence[bool], path: str | os.PathLike, limit: int = 40) -> None:
    """Predicted vs ground-truth frame spans, one row per instance (first ``limit``)."""
    n = min(len(ids), limit)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 0.25 * n + 1))
        for row in range(n):
            g, p = truth[row], predicted[row]
            ax.barh(row, g.end - g.start, left=g.start, height=0.8, color="0.8")
            ax.barh(row, p.end - p.start, left=p.start, height=0.35,
                    color="tab:green" if correct[row] else "tab:red")
        ax.set_yticks(range(n))
        ax.set_yticklabels(ids[:n])
        ax.invert_yaxis()
        ax.set_xlabel("frame")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
