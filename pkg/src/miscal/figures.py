"""Reliability-diagram rendering. Output SVGs are byte-deterministic for identical inputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "miscal"

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import ReliabilityBins, ece_from_bins  # noqa: E402

ACCURACY_COLOR = "#c23b22"
CONFIDENCE_COLOR = "#3b6fc2"
DIAGONAL_COLOR = "#d4a017"


def _draw_panel(ax, bins: ReliabilityBins, title: str):
    edges = bins.edges()
    centers = (edges[:-1] + edges[1:]) / 2.0
    width = 1.0 / bins.num_bins
    ax.bar(centers, bins.accuracy, width=width * 0.9, color=ACCURACY_COLOR,
           alpha=0.85, label="accuracy", zorder=2)
    ax.bar(centers, bins.mean_confidence, width=width * 0.55, color=CONFIDENCE_COLOR,
           alpha=0.75, label="confidence", zorder=3)
    ax.plot([0, 1], [0, 1], color=DIAGONAL_COLOR, linewidth=1.5, zorder=4)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence bin")
    ax.set_ylabel("accuracy / mean confidence")
    ax.set_title(f"{title} (ECE {ece_from_bins(bins):.3f})")
    ax.legend(loc="upper left", fontsize=8)


def emit_reliability_svg(bins_pre: ReliabilityBins, bins_post: ReliabilityBins, path) -> None:
    """Write a two-panel pre/post reliability diagram as a standalone SVG."""
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 4.2))
    _draw_panel(axes[0], bins_pre, "before attack")
    _draw_panel(axes[1], bins_post, "after attack")
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
