"""Matplotlib versions of the report figures (PNG, written next to the CSVs)."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from ..vf_domain import RetestCITable  # noqa: E402
from .analysis import BinnedStats, PointwiseMap  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "svg.hashsalt": "octvf",
}
_PNG_META = {"Software": None}


def _save(fig, path: str) -> str:
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_pointwise_map(pm: PointwiseMap, path: str, title: str = "Pointwise Pearson r") -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 4.2))
        cmap = plt.get_cmap("Blues")
        for (x, y), v in zip(pm.coords, pm.values):
            if np.isfinite(v):
                ax.add_patch(Rectangle((x - 3, y - 3), 6, 6, facecolor=cmap(v), edgecolor="0.3", lw=0.4))
                ax.text(x, y, f"{v:.2f}", ha="center", va="center", fontsize=6,
                        color="white" if v > 0.6 else "black")
            else:
                ax.add_patch(Rectangle((x - 3, y - 3), 6, 6, facecolor="white", edgecolor="0.3",
                                       hatch="///", lw=0.4))
                ax.text(x, y, "n/a", ha="center", va="center", fontsize=6)
        ax.axhline(0, color="0.6", lw=0.5)
        ax.axvline(0, color="0.6", lw=0.5)
        ax.set_xlim(-30, 30)
        ax.set_ylim(-24, 24)
        ax.set_aspect("equal")
        ax.set_xlabel("x (deg)")
        ax.set_ylabel("y (deg)")
        ax.set_title(title)
        sm = plt.cm.ScalarMappable(cmap=cmap, norm=plt.Normalize(0, 1))
        fig.colorbar(sm, ax=ax, shrink=0.8, label="r")
        fig.tight_layout()
        return _save(fig, path)


def plot_binned_whiskers(binned: BinnedStats, path: str, ci: RetestCITable | None = None,
                         coverage: tuple[int, int, float] | None = None) -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 4.5))
        lo, hi = binned.edges[0], binned.edges[-1]
        if ci is not None:
            ax.fill_between(ci.measured_db, ci.lower_db, ci.upper_db, color="#c6dbef", alpha=0.7,
                            lw=0, label="retest 90% CI")
        ax.plot([lo, hi], [lo, hi], ls="--", color="0.5", lw=0.8)
        sel = np.flatnonzero(binned.populated)
        width = 0.6 * (binned.edges[1] - binned.edges[0])
        stats = [{"med": binned.median[b], "q1": binned.q25[b], "q3": binned.q75[b],
                  "whislo": binned.p5[b], "whishi": binned.p95[b], "fliers": []} for b in sel]
        if stats:
            ax.bxp(stats, positions=binned.centers[sel], widths=width, showfliers=False,
                   medianprops={"color": "#d62728"}, manage_ticks=False)
        ax.set_xlim(lo, hi)
        ax.set_ylim(lo, hi)
        ax.set_xlabel("measured (dB)")
        ax.set_ylabel("predicted (dB)")
        if coverage is not None:
            ax.set_title(f"{coverage[0]} of {coverage[1]} whiskers inside retest CI")
        if ci is not None:
            ax.legend(loc="upper left", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_training_curves(rows: Sequence[dict], path: str) -> str:
    """``rows`` are parsed training-log records (epoch, train_loss, val_loss, val_r2, lr)."""
    epoch = [int(r["epoch"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        a1.plot(epoch, [float(r["train_loss"]) for r in rows], label="train")
        a1.plot(epoch, [float(r["val_loss"]) for r in rows], label="validation")
        a1.set_xlabel("epoch")
        a1.set_ylabel("MSE (dB$^2$)")
        a1.set_yscale("log")
        a1.legend(frameon=False)
        a2.plot(epoch, [float(r["val_r2"]) for r in rows], color="C2")
        a2.set_xlabel("epoch")
        a2.set_ylabel("validation R$^2$")
        fig.tight_layout()
        return _save(fig, path)


def render_figures(out_dir: str, maps: PointwiseMap | None = None, binned: BinnedStats | None = None,
                   ci: RetestCITable | None = None, coverage=None) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if maps is not None:
        paths.append(plot_pointwise_map(maps, os.path.join(out_dir, "pointwise_map.png")))
    if binned is not None:
        paths.append(plot_binned_whiskers(binned, os.path.join(out_dir, "binned_whiskers.png"), ci, coverage))
    return paths
