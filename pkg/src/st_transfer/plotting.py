"""Static SVG figures: training-accuracy curves and WER-vs-n bar charts."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .exceptions import UsageError  # noqa: E402
from .trainer import CurvePoint  # noqa: E402


def plot_curves(curves: Mapping[str, Sequence[CurvePoint]], path: str | Path,
                metric: str = "token_accuracy", title: str = "") -> Path:
    """One labelled line per run, metric against epoch."""
    if not curves:
        raise UsageError("no curves to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, curve in curves.items():
        ax.plot([p.epoch for p in curve], [getattr(p, metric) for p in curve], marker="o",
                markersize=3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric.replace("_", " "))
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_wer_bars(rows: Sequence[Mapping], path: str | Path, title: str = "") -> Path:
    """Grouped bars of WER per n, one bar per filtering setting.

    ``rows`` need keys ``n``, ``filtered`` and ``wer``.
    """
    if not rows:
        raise UsageError("no rows to plot")
    ns = sorted({int(r["n"]) for r in rows})
    settings = sorted({str(r["filtered"]) for r in rows})
    width = 0.8 / len(settings)
    fig, ax = plt.subplots(figsize=(6, 4))
    for j, s in enumerate(settings):
        wer = {int(r["n"]): float(r["wer"]) for r in rows if str(r["filtered"]) == s}
        xs = [i + j * width for i, n in enumerate(ns) if n in wer]
        ax.bar(xs, [wer[n] for n in ns if n in wer], width,
               label="filtered" if s.lower() in ("true", "1", "yes") else "no filtering")
    ax.set_xticks([i + width * (len(settings) - 1) / 2 for i in range(len(ns))])
    ax.set_xticklabels([str(n) for n in ns])
    ax.set_xlabel("n (pseudo-labels sampled per example)")
    ax.set_ylabel("dev WER (%)")
    if title:
        ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    if path.suffix.lower() != ".svg":
        path = path.with_suffix(".svg")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
