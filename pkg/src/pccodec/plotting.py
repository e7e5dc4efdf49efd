"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import RAPoint, pareto_front  # noqa: E402

LOG2_CLASSES = np.log2(40)

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (4.5, 3.2),
    "figure.dpi": 150,
}


def ra_figure(curves: Dict[str, Sequence[RAPoint]], path, title: Optional[str] = None, bound: bool = True):
    """Rate-accuracy plot, one line per named curve (Pareto front solid)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, pts in curves.items():
            pts = sorted(pts, key=lambda p: p.rate_bits)
            front = pareto_front(pts)
            line = ax.plot([p.rate_bits for p in front], [p.top1 for p in front], marker="o", ms=3, label=name)[0]
            on_front = {id(p) for p in front}
            rest = [p for p in pts if id(p) not in on_front]
            if rest:
                ax.scatter([p.rate_bits for p in rest], [p.top1 for p in rest], s=8, color=line.get_color(), alpha=0.4)
        if bound:
            ax.axvline(LOG2_CLASSES, color="0.5", lw=0.8, ls="--", label=r"$\log_2 40$ bits")
        ax.set_xscale("log")
        ax.set_xlabel("rate (bits per cloud)")
        ax.set_ylabel("top-1 accuracy (%)")
        ax.grid(True, which="both", lw=0.3, alpha=0.5)
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def cloud_figure(points: np.ndarray, path, highlight: Optional[np.ndarray] = None, title: Optional[str] = None):
    """3D scatter of a cloud; ``highlight`` indices drawn on top in red."""
    pts = np.asarray(points)
    with plt.rc_context(STYLE):
        fig = plt.figure()
        ax = fig.add_subplot(projection="3d")
        ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], s=2, color="0.4", alpha=0.6)
        if highlight is not None and len(highlight):
            h = pts[np.asarray(highlight)]
            ax.scatter(h[:, 0], h[:, 1], h[:, 2], s=14, color="tab:red")
        ax.set_box_aspect((1, 1, 1))
        lim = 1.05 * max(np.abs(pts).max(), 1e-6)
        for set_lim in (ax.set_xlim, ax.set_ylim, ax.set_zlim):
            set_lim(-lim, lim)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def training_figure(history: Sequence[dict], path):
    """Loss and accuracy per epoch from a training log."""
    ep = [h["epoch"] for h in history]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 2.8))
        a1.plot(ep, [h["loss"] for h in history], label="train")
        if history and "val_loss" in history[0]:
            a1.plot(ep, [h["val_loss"] for h in history], label="val")
        a1.set_xlabel("epoch")
        a1.set_ylabel("loss")
        a1.set_yscale("log")
        a1.legend()
        a2.plot(ep, [h["accuracy"] for h in history], label="train acc")
        a2.set_xlabel("epoch")
        a2.set_ylabel("accuracy (%)")
        a2b = a2.twinx()
        a2b.plot(ep, [h["rate"] for h in history], color="tab:orange", label="rate")
        a2b.set_ylabel("rate (bits)")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
