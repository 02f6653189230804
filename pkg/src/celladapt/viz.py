"""Static figure rendering for run inspection."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import Patch
from .heatmap import Heatmap, PointSet
from .pipeline import AdaptationReport


def render_overlay(
    patch: Patch, heatmap: Heatmap, points: PointSet, out_path: str | Path,
    title: str | None = None,
) -> None:
    """Patch with the predicted heatmap and detected peaks side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    axes[0].imshow(patch.pixels, cmap="gray", vmin=0, vmax=255)
    axes[0].set_title("patch")
    axes[1].imshow(heatmap.values, cmap="magma", vmin=0, vmax=255)
    axes[1].set_title("heatmap")
    axes[2].imshow(patch.pixels, cmap="gray", vmin=0, vmax=255)
    if len(points):
        arr = points.to_array()
        axes[2].scatter(arr[:, 1], arr[:, 0], s=40, facecolors="none",
                        edgecolors="red", linewidths=1.2)
    axes[2].set_title(f"{len(points)} detected")
    for ax in axes:
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def render_f1_curve(report: AdaptationReport, out_path: str | Path) -> None:
    """Target-domain F1 against the cumulative pseudo-label count."""
    rows = [r for r in report.records if r.f1_target is not None]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r.cumulative_pseudo for r in rows],
            [r.f1_target for r in rows], "o-", color="tab:red",
            label="target F1")
    src_rows = [r for r in report.records if r.f1_source is not None]
    if src_rows:
        ax.plot([r.cumulative_pseudo for r in src_rows],
                [r.f1_source for r in src_rows], "s--", color="tab:blue",
                label="source F1")
    for r in rows:
        ax.annotate(f"it{r.iteration}", (r.cumulative_pseudo, r.f1_target),
                    textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("cumulative pseudo labels")
    ax.set_ylabel("F1")
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def render_count_histogram(
    hist: dict[int, float], out_path: str | Path, title: str = "",
) -> None:
    """Pseudo-label correctness rate per detected-cell count."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    counts = sorted(hist)
    ax.bar([str(c) for c in counts], [hist[c] for c in counts],
           color="tab:purple")
    ax.set_xlabel("detected cells per patch")
    ax.set_ylabel("correct pseudo-label rate")
    ax.set_ylim(0.0, 1.05)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
