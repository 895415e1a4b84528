"""PNG figures for the CLI reports (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_map_curves(tables: Mapping[str, object], path) -> Path:
    """mAP against IoU threshold, one line per named table (``MapTable`` or dict)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for name, table in tables.items():
            per = table.per_threshold if hasattr(table, "per_threshold") else table
            ths = sorted(per)
            avg = float(np.mean([per[t] for t in ths]))
            ax.plot(ths, [per[t] for t in ths], marker="o", ms=3, label=f"{name} (avg {avg:.1f})")
        ax.set_xlabel("IoU threshold")
        ax.set_ylabel("mAP (%)")
        ax.set_ylim(0, 100)
        ax.legend()
        return _save(fig, path)


def plot_memory_scaling(rows: Sequence, path) -> Path:
    """Log-log peak retained scalars against length; cap hits drawn as crosses at the top."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        models = list(dict.fromkeys(r.model for r in rows))
        top = max((r.peak for r in rows if r.peak is not None), default=1)
        for m in models:
            ok = [(r.length, r.peak) for r in rows if r.model == m and r.peak is not None]
            oom = [r.length for r in rows if r.model == m and r.peak is None]
            line = None
            if ok:
                x, y = zip(*ok)
                (line,) = ax.plot(x, y, marker="o", ms=3, label=m)
            if oom:
                color = line.get_color() if line is not None else None
                ax.scatter(oom, [top * 2] * len(oom), marker="x", color=color, label=f"{m} (out of memory)")
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("sequence length L")
        ax.set_ylabel("peak retained scalars")
        ax.legend(fontsize=7)
        return _save(fig, path)


def plot_corpus_stats(stats, path, bins: int = 20) -> Path:
    """2x2 histogram panel of a ``CorpusStats``."""
    hists = stats.histograms(bins)
    titles = {
        "frame_number": "frames per sequence",
        "query_length": "query length (tokens)",
        "grounded_ratio": "grounded length ratio",
        "segment_count": "segments per query",
    }
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(6.5, 4.5))
        for ax, (name, (counts, edges)) in zip(axes.ravel(), hists.items()):
            ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="white", linewidth=0.5)
            ax.set_title(titles.get(name, name))
            ax.set_ylabel("count")
            ax.yaxis.set_major_locator(MaxNLocator(integer=True))
            if name in ("query_length", "segment_count"):
                ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        return _save(fig, path)


def plot_history(history: Sequence[dict], path) -> Path:
    """Train loss and validation mAP per epoch."""
    ep = [h["epoch"] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(ep, [h["train_loss"] for h in history], color="C0", marker="o", ms=3)
        ax.set_xlabel("epoch")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_ylabel("train loss", color="C0")
        val = [(h["epoch"], h["val_map"]) for h in history if "val_map" in h]
        if val:
            ax2 = ax.twinx()
            x, y = zip(*val)
            ax2.plot(x, y, color="C1", marker="s", ms=3)
            ax2.set_ylabel("val mAP (%)", color="C1")
            ax2.set_ylim(0, 100)
            ax2.grid(False)
        return _save(fig, path)


def plot_ablation(results: Mapping[str, Sequence[float]], path) -> Path:
    """Bar chart of average mAP per variant with one dot per seed."""
    names = list(results)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        means = [float(np.mean(results[n])) for n in names]
        ax.bar(range(len(names)), means, color="0.75")
        for i, n in enumerate(names):
            ax.scatter([i] * len(results[n]), results[n], color="k", s=10, zorder=3)
        ax.set_xticks(range(len(names)), names, rotation=20, ha="right")
        ax.set_ylabel("average mAP (%)")
        ax.set_ylim(0, 100)
        return _save(fig, path)
