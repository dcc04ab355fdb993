"""Optional figures written next to the CSV outputs (``--figures``).

Uses the non-interactive Agg backend, so it works on headless machines.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .evaluation.report import METHOD_LABELS, _ordered  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}
CLASS_COLORS = ("#1f77b4", "#d62728")


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    fig.savefig(tmp)
    plt.close(fig)
    tmp.replace(path)
    return path


def plot_toy2d(pts, panels: dict, train, eps: float, path):
    """One panel per classifier: decision regions, training points and eps-squares.

    ``panels`` maps a title to per-grid-point labels.
    """
    n = int(round(np.sqrt(len(pts))))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4), squeeze=False)
        for ax, (title, labels) in zip(axes[0], panels.items()):
            img = np.asarray(labels).reshape(n, n)
            ax.imshow(img, origin="lower", extent=(0, 1, 0, 1), cmap="coolwarm", alpha=0.35,
                      vmin=0, vmax=1, interpolation="nearest")
            for x, y in zip(train.pixels, train.labels):
                ax.add_patch(Rectangle(x - eps, 2 * eps, 2 * eps, fill=False, lw=0.5,
                                       ec=CLASS_COLORS[y]))
            ax.scatter(*train.pixels.T, c=[CLASS_COLORS[y] for y in train.labels], s=6)
            ax.set(title=title, xlim=(0, 1), ylim=(0, 1), aspect="equal")
        return _save(fig, path)


def plot_histogram(bins, counts, path, threshold: float = 8 / 255):
    """Per-pixel |delta| histogram on a log count axis, with a threshold marker."""
    bins, counts = np.asarray(bins), np.asarray(counts)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(bins, np.maximum(counts, 0), width=1 / 255, align="edge", color="0.4")
        ax.axvline(threshold, color=CLASS_COLORS[1], lw=1, ls="--", label=f"{threshold:.4f}")
        ax.set(xlabel="|pixel change|", ylabel="count", yscale="log" if counts.any() else "linear")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_report(results, path, metric: str = "ra_linf_test"):
    """Bar chart of one metric per method, with the spread across problems."""
    results = _ordered(results)
    stats = [r.stats(metric) for r in results]
    means = [100 * s[0] if s else 0 for s in stats]
    stds = [100 * s[1] if s else 0 for s in stats]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.1 * len(results) + 2, 3))
        ax.bar(range(len(results)), means, yerr=stds, color="0.5", capsize=3)
        ax.set_xticks(range(len(results)), [METHOD_LABELS.get(r.method, r.method) for r in results],
                      rotation=30, ha="right")
        ax.set(ylabel=f"{metric} (%)", ylim=(0, 105))
        return _save(fig, path)


def plot_margins(sizes, medians, path):
    """Median test margin as the training set grows."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(sizes, medians, "o-", color="0.2")
        ax.set(xscale="log", xlabel="training points", ylabel="median margin")
        return _save(fig, path)
