"""Matplotlib figures written next to the delimited reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(history: Sequence[dict], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        steps = np.arange(1, len(history) + 1)
        for key in ("total", "caption", "nce"):
            if history and key in history[0]:
                ax.plot(steps, [h[key] for h in history], label=key, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_ablation(table, path: str | Path) -> Path:
    """Grouped bars, one group per metric column, one bar per model."""
    from .harness import TABLE_COLUMNS

    rows = {"audio_raw": table.baseline, **table.rows}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        width = 0.8 / len(rows)
        x = np.arange(len(TABLE_COLUMNS))
        for i, (name, row) in enumerate(rows.items()):
            ax.bar(x + (i - (len(rows) - 1) / 2) * width, [row[c] for c in TABLE_COLUMNS],
                   width, label=name)
        ax.set_xticks(x, TABLE_COLUMNS)
        ax.set_ylabel("score (0-100)")
        ax.legend(frameon=False, ncol=len(rows), loc="upper center", bbox_to_anchor=(0.5, 1.18))
        return _save(fig, path)


def plot_explanation(frames: np.ndarray, video_map: np.ndarray | None, audio_map: np.ndarray | None,
                     audio_tokens: Sequence[str], decoder_map: np.ndarray | None,
                     decoder_tokens: Sequence[str], title: str, path: str | Path) -> Path:
    """Frames with attention overlay, plus audio-token and decoder-token bars."""
    t = frames.shape[0]
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(2 * max(t, 3), 4.6))
        grid = fig.add_gridspec(2, max(t, 2), height_ratios=[1.3, 1])
        for i in range(t):
            ax = fig.add_subplot(grid[0, i])
            ax.imshow(frames[i])
            if video_map is not None:
                h, w = frames.shape[1:3]
                ax.imshow(video_map[i], cmap="inferno", alpha=0.5, vmin=0, vmax=1,
                          extent=(0, w, h, 0), interpolation="nearest")
            ax.set_title(f"frame {i}")
            ax.axis("off")
        half = max(t, 2) // 2
        for sl, scores, labels, name in (
                (slice(0, half), audio_map, audio_tokens, "audio-caption attention"),
                (slice(half, None), decoder_map, decoder_tokens, "decoder attention")):
            ax = fig.add_subplot(grid[1, sl])
            if scores is not None:
                ax.bar(range(len(scores)), scores, color="tab:red")
                ax.set_xticks(range(len(scores)), labels, rotation=60, ha="right")
                ax.set_ylim(0, 1.05)
            ax.set_title(name)
        fig.suptitle(title)
        return _save(fig, path)
