"""Report figures: loss curves, confusion matrices, sweep curves, mask demos.

Figures are built on a bare ``Figure`` with the Agg canvas, so nothing here
touches pyplot's global state and the output does not depend on a display.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

# no timestamps or version strings, so reruns give identical files
_PNG_META = {"Software": None}
_METRIC_STYLE = {"oa": ("OA", "o-"), "aa": ("AA", "s--"), "kappa": ("kappa", "^:")}


def _figure(width: float = 6.0, height: float = 4.0) -> Figure:
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    return path


def plot_training_curves(steps: Sequence[Mapping], epochs: Sequence[Mapping], path, best_epoch=None) -> Path:
    """Per-step D/G losses on the left; per-epoch means (and val OA) on the right."""
    fig = _figure(10, 4)
    ax, ax2 = fig.subplots(1, 2)
    x = [s["step"] for s in steps]
    ax.plot(x, [s["d_loss"] for s in steps], lw=0.8, label="D")
    ax.plot(x, [s["g_loss"] for s in steps], lw=0.8, label="G")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)

    ep = [e["epoch"] for e in epochs]
    ax2.plot(ep, [e["d_loss"] for e in epochs], "o-", ms=3, label="D (epoch mean)")
    ax2.plot(ep, [e["g_loss"] for e in epochs], "s-", ms=3, label="G (epoch mean)")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("loss")
    if best_epoch is not None:
        ax2.axvline(best_epoch, color="0.5", ls="--", lw=0.8, label="selected")
    if epochs and "val_oa" in epochs[0]:
        acc = ax2.twinx()
        acc.plot(ep, [e["val_oa"] for e in epochs], "k.-", lw=0.8, label="val OA")
        acc.set_ylim(0, 1.02)
        acc.set_ylabel("validation OA")
        acc.legend(frameon=False, loc="lower right")
    ax2.legend(frameon=False, loc="upper right")
    return _save(fig, path)


def plot_confusion(counts: np.ndarray, path, class_names: Sequence[str] | None = None, title: str = "") -> Path:
    """Row-normalized heat map annotated with raw counts."""
    counts = np.asarray(counts)
    k = counts.shape[0]
    rows = counts.sum(axis=1, keepdims=True)
    frac = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    names = list(class_names) if class_names else [str(i + 1) for i in range(k)]
    fig = _figure(1.2 + 0.6 * k, 1.0 + 0.6 * k)
    ax = fig.add_subplot(1, 1, 1)
    im = ax.imshow(frac, vmin=0, vmax=1, cmap="Blues")
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(int(counts[i, j])), ha="center", va="center", color="white" if frac[i, j] > 0.5 else "black", fontsize=8)
    ax.set_xticks(range(k), names, rotation=45, ha="right")
    ax.set_yticks(range(k), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("reference")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_sweep(rows: Sequence[Mapping], param: str, path) -> Path:
    """OA / AA / kappa against one swept parameter."""
    rows = sorted(rows, key=lambda r: r[param])
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    x = [r[param] for r in rows]
    for key, (label, style) in _METRIC_STYLE.items():
        ax.plot(x, [r[key] for r in rows], style, label=label)
    ax.set_xticks(x)
    ax.set_xlabel(param)
    ax.set_ylabel("accuracy")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_masks(feature: np.ndarray, panels: Mapping[str, np.ndarray], path) -> Path:
    """The input plane next to each regularizer's output on it."""
    fig = _figure(2.4 * (len(panels) + 1), 2.6)
    axes = fig.subplots(1, len(panels) + 1)
    for ax, (title, img) in zip(axes, [("input", feature), *panels.items()]):
        ax.imshow(img, cmap="gray", interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)
