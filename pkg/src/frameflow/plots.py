"""Figure rendering for the CLI report paths.

Each report-producing command writes a PNG next to its CSV output.  The Agg
backend is forced so rendering works headless, and figures avoid anything
time- or environment-dependent so reruns produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_loss_curve(history, path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = np.arange(len(history))
    if np.all(np.asarray(history) > 0):
        ax.semilogy(steps, history, lw=0.8)
    else:
        ax.plot(steps, history, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def save_filmstrip(video: np.ndarray, side: int, path, title: str | None = None) -> None:
    """All frames of one clip in a row, gray-scale, fixed [-1, 1] range."""
    n = video.shape[0]
    fig, axes = plt.subplots(1, n, figsize=(1.4 * n, 1.8))
    if n == 1:
        axes = [axes]
    for i, ax in enumerate(axes):
        ax.imshow(video[i].reshape(side, side), cmap="gray", vmin=-1.0, vmax=1.0,
                  interpolation="nearest")
        ax.set_title(f"f{i}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=10)
    _save(fig, path)


def save_attention_grid(maps: dict[int, np.ndarray], path) -> None:
    """One heatmap per recorded sampler step (row-stochastic N x N each)."""
    steps = sorted(maps)
    fig, axes = plt.subplots(1, len(steps), figsize=(2.4 * len(steps), 2.6))
    if len(steps) == 1:
        axes = [axes]
    for ax, step in zip(axes, steps):
        im = ax.imshow(maps[step], cmap="viridis", vmin=0.0, vmax=1.0,
                       interpolation="nearest")
        ax.set_title(f"step {step}", fontsize=9)
        ax.set_xlabel("key frame", fontsize=8)
        ax.set_ylabel("query frame", fontsize=8)
    fig.colorbar(im, ax=axes, shrink=0.8)
    _save(fig, path)


def save_drift_bars(report, path, top_n: int = 20) -> None:
    """Three panels: mean change by parameter family, by block, and the top movers."""
    fig, (ax1, ax2, ax3) = plt.subplots(1, 3, figsize=(15, 4.5))
    kinds = list(report.by_kind)
    ax1.bar(kinds, [report.by_kind[k] for k in kinds], color="tab:blue")
    ax1.set_title("mean relative change by family")
    ax1.tick_params(axis="x", rotation=30)

    blocks = sorted(report.by_block)
    ax2.bar([str(b) for b in blocks], [report.by_block[b] for b in blocks],
            color="tab:orange")
    ax2.set_title("mean relative change by block")
    ax2.set_xlabel("block")

    top = report.top(top_n)[::-1]
    ax3.barh([name for name, _ in top], [val for _, val in top], color="tab:green")
    ax3.set_title(f"top {len(top)} parameters")
    ax3.tick_params(axis="y", labelsize=7)
    fig.tight_layout()
    _save(fig, path)


def save_centroid_tracks(tracks, side: int, path, labels=None) -> None:
    """Overlay centroid trajectories of a handful of clips on the pixel grid."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for i, track in enumerate(tracks):
        track = np.asarray(track)
        name = None if labels is None else labels[i]
        ax.plot(track[:, 0], track[:, 1], marker="o", ms=3, lw=1, label=name)
        ax.plot(track[0, 0], track[0, 1], marker="s", ms=6, color="black")
    ax.set_xlim(-0.5, side - 0.5)
    ax.set_ylim(side - 0.5, -0.5)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title("centroid tracks (square = first frame)")
    if labels is not None:
        ax.legend(fontsize=7)
    ax.grid(True, alpha=0.3)
    _save(fig, path)
