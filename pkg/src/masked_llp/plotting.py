"""Figure rendering (matplotlib, Agg backend) and colormapped netpbm panels."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import INTERVAL_ORDER, INTERVALS, write_netpbm  # noqa: E402

INTERVAL_COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"]

RC = {
    "font.size": 9,
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "figure.dpi": 100,
    "savefig.dpi": 150,
}

# no timestamps in artifacts
PNG_METADATA = {"Software": None}


def _save(fig, stem: Path, ppm: bool) -> dict[str, Path]:
    png = stem.with_suffix(".png")
    fig.savefig(png, metadata=PNG_METADATA)
    written = {"png": png}
    if ppm:
        fig.canvas.draw()
        rgba = np.asarray(fig.canvas.buffer_rgba())
        path = stem.with_suffix(".ppm")
        write_netpbm(path, rgba[:, :, :3] / 255.0, maxval=255)
        written["ppm"] = path
    plt.close(fig)
    return written


def loss_curve_figure(rows, stem: str | Path, ppm: bool = False) -> dict[str, Path]:
    """Two panels: uniform gamma=2 (FocalProp) and the per-interval schedule (WFL)."""
    stem = Path(stem)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2), sharey=True)
        for ax, mode, title in zip(axes, ("FocalProp", "WFL"), ("uniform $\\gamma=2$", "weighted $\\gamma$")):
            for color, iid in zip(INTERVAL_COLORS, INTERVAL_ORDER):
                pts = [(x, l) for i, m, x, l, _ in rows if i == iid.value and m == mode]
                xs, ls = zip(*pts)
                ax.plot(xs, ls, color=color, label=INTERVALS[iid].label)
            ax.set_title(title)
            ax.set_xlabel("estimated proportion")
            ax.set_xlim(0, 1)
            ax.set_ylim(0, 0.2)
        axes[0].set_ylabel("loss")
        axes[1].legend(loc="upper right", frameon=False)
        fig.tight_layout()
        return _save(fig, stem, ppm)


def report_figure(report: dict, stem: str | Path) -> dict[str, Path]:
    """Per-interval recall bars plus the three macro scores."""
    stem = Path(stem)
    labels = [INTERVALS[i].label for i in INTERVAL_ORDER] + ["mRecall", "mPrecision", "mF1"]
    values = list(report["per_interval_recall"]) + [report["m_recall"], report["m_precision"], report["m_f1"]]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 3))
        colors = INTERVAL_COLORS + ["0.4"] * 3
        ax.bar(range(len(values)), values, color=colors)
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("score")
        for x, v in enumerate(values):
            ax.text(x, v + 0.02, f"{v:.3f}", ha="center", fontsize=7)
        fig.tight_layout()
        return _save(fig, stem, ppm=False)


def colorize(values: np.ndarray, cmap: str, vmax: float | None = None) -> np.ndarray:
    """Map a 2-D array through a matplotlib colormap; returns RGB in [0,1]."""
    values = np.asarray(values, dtype=np.float64)
    top = float(values.max()) if vmax is None else vmax
    norm = values / top if top > 0 else np.zeros_like(values)
    return matplotlib.colormaps[cmap](np.clip(norm, 0.0, 1.0))[:, :, :3]


def overlay(pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """Red where the positive map dominates, blue where the negative does."""
    top = max(float(pos.max()), float(neg.max()), 1e-12)
    rgb = np.zeros(pos.shape + (3,))
    rgb[:, :, 0] = pos / top
    rgb[:, :, 2] = neg / top
    return np.clip(rgb, 0.0, 1.0)


def upscale(arr: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)
