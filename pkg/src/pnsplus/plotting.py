"""Report figures. Everything renders off-screen to files."""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
}

METRIC_LABELS = {
    "dice": "Dice (max)",
    "sen": "Sen (mean)",
    "fbeta": r"$F_\beta$ (mean)",
    "wfbeta": r"$F_\beta^w$",
    "s_alpha": r"$S_\alpha$",
    "e_phi": r"$E_\phi$ (mean)",
}


@contextmanager
def _figure(path, size=(5.0, 3.2), **kw):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size, **kw)
        try:
            yield fig, ax
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path)
        finally:
            plt.close(fig)


def loss_curve(losses, path, smooth: int = 20) -> None:
    y = np.asarray(losses, dtype=np.float64)
    with _figure(path) as (_, ax):
        ax.plot(y, color="0.7", lw=0.8, label="step")
        if len(y) >= smooth:
            k = np.ones(smooth) / smooth
            ax.plot(np.arange(smooth - 1, len(y)), np.convolve(y, k, mode="valid"), color="C0", label=f"mean of {smooth}")
        ax.set_xlabel("step")
        ax.set_ylabel("BCE loss")
        ax.set_yscale("log")
        ax.legend()


def metric_bars(rows: dict[str, dict[str, float]], path, title: str = "") -> None:
    """Grouped bars: one group per row label (clip or attribute), one bar per metric."""
    labels = list(rows)
    metrics = list(METRIC_LABELS)
    width = 0.8 / len(metrics)
    x = np.arange(len(labels))
    with _figure(path, size=(max(5.0, 0.7 * len(labels) + 2.0), 3.2)) as (_, ax):
        for i, m in enumerate(metrics):
            vals = [rows[r].get(m, np.nan) for r in labels]
            ax.bar(x + (i - (len(metrics) - 1) / 2) * width, vals, width, label=METRIC_LABELS[m])
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("score")
        if title:
            ax.set_title(title)
        ax.legend(ncol=3, loc="lower left")


def threshold_curves(curves: dict[str, np.ndarray], path) -> None:
    with _figure(path) as (_, ax):
        t = np.arange(256)
        for name, y in curves.items():
            ax.plot(t, y, label=METRIC_LABELS.get(name, name))
        ax.set_xlabel("threshold")
        ax.set_ylabel("score")
        ax.set_xlim(0, 255)
        ax.set_ylim(0, 1.02)
        ax.legend()


def center_bias(heatmap: np.ndarray, path, title: str = "center bias") -> None:
    with _figure(path, size=(4.5, 3.0)) as (fig, ax):
        im = ax.imshow(heatmap, cmap="magma", vmin=0.0, vmax=max(float(heatmap.max()), 1e-12))
        ax.set_title(title)
        ax.grid(False)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)


def size_histogram(ratios, path, bins: int = 20) -> None:
    with _figure(path) as (_, ax):
        ax.hist(np.asarray(ratios), bins=bins, range=(0.0, 1.0), color="C1", edgecolor="white")
        ax.set_xlabel("foreground ratio")
        ax.set_ylabel("frames")


def contrast_scatter(global_c, local_c, path) -> None:
    with _figure(path, size=(3.6, 3.4)) as (_, ax):
        ax.scatter(global_c, local_c, s=8, alpha=0.6)
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("global contrast")
        ax.set_ylabel("local contrast")


def bench_bars(timings: dict[str, float], path) -> None:
    with _figure(path, size=(4.0, 2.6)) as (_, ax):
        names = list(timings)
        ax.barh(names, [timings[n] for n in names], color=["C0", "C3"][: len(names)])
        ax.set_xscale("log")
        ax.set_xlabel("seconds")
