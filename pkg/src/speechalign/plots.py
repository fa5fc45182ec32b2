"""Figures written next to the text/JSON reports.

All functions take an output path, draw with the non-interactive Agg
backend and close the figure before returning.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # fixed metadata keeps the PNG bytes reproducible
    "svg.hashsalt": "speechalign",
}


def figsize(width: float = 6.0, ratio: float | None = None) -> tuple[float, float]:
    if ratio is None:
        ratio = (math.sqrt(5) - 1) / 2
    return width, width * ratio


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_corpus_stats(stats, path: str | Path) -> Path:
    """Hours and captions per source, side by side."""
    rows = stats.rows
    names = [r.source for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=figsize(8, 0.4))
        ax1.barh(names, [r.duration_hours for r in rows], color="#4c72b0")
        ax1.set_xlabel("hours")
        ax1.invert_yaxis()
        ax2.barh(names, [r.n_captions for r in rows], color="#dd8452")
        ax2.set_xlabel("captions")
        ax2.invert_yaxis()
        ax2.set_yticklabels([])
        t = stats.total
        fig.suptitle(f"{t.n_audios} audios, {t.n_captions} captions, {t.duration_hours:.2f} h")
        return _save(fig, path)


def plot_loss_trace(trace: Sequence[tuple[int, float, float]], path: str | Path) -> Path:
    steps = [s for s, _, _ in trace]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        ax.plot(steps, [loss for _, _, loss in trace], lw=1.2, color="#4c72b0", label="loss")
        ax.set_xlabel("step")
        ax.set_ylabel("masked next-token loss")
        ax.set_yscale("log")
        ax2 = ax.twinx()
        ax2.plot(steps, [lr for _, lr, _ in trace], lw=0.8, ls="--", color="#c44e52", label="lr")
        ax2.set_ylabel("learning rate")
        ax2.spines["right"].set_visible(True)
        fig.legend(loc="upper right", bbox_to_anchor=(0.88, 0.88))
        return _save(fig, path)


def plot_eval_report(report, path: str | Path) -> Path:
    from .evaluation import CATEGORIES

    cats = [c for c in CATEGORIES if c in report.category_scores]
    vals = [report.category_scores[c] for c in cats]
    if report.overall is not None:
        cats.append("ALL")
        vals.append(report.overall)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(5))
        colors = ["#4c72b0"] * (len(cats) - 1) + ["#55a868"]
        ax.bar(cats, vals, color=colors)
        ax.set_ylim(0, 100)
        ax.set_ylabel("accuracy (%)")
        for x, v in enumerate(vals):
            ax.text(x, v + 1.5, f"{v:.1f}", ha="center", fontsize=7)
        if report.chat_score is not None:
            ax.set_title(f"Chat agreement {report.chat_score:.2f} / 10")
        return _save(fig, path)
