"""Figure output for reports. Files are written deterministically (fixed SVG hash salt, no dates)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "dualmotion",
    "svg.fonttype": "path",
}

CLIP_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def save_figure(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = path.suffix.lstrip(".").lower()
    meta = {"Date": None} if fmt == "svg" else {"Software": None} if fmt == "png" else None
    with plt.rc_context(RC):
        fig.savefig(path, format=fmt, metadata=meta, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_history(history: Sequence[dict], path: str | Path, window: int = 20) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        for key, label in (("l_spatial", "spatial"), ("l_org_temp", "temporal"), ("l_ad_temp", "debiased temporal")):
            y = np.array([h[key] for h in history], dtype=float)
            if y.size == 0 or np.all(np.isnan(y)):
                continue
            k = min(window, y.size)
            smooth = np.convolve(np.nan_to_num(y), np.ones(k) / k, mode="valid")
            ax.plot(np.arange(smooth.size) + k - 1, smooth, label=label, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel(f"loss (moving mean, {window})")
        ax.legend(frameon=False)
    return save_figure(fig, path)


def plot_pretrain_loss(losses: Sequence[float], path: str | Path, window: int = 50) -> Path:
    return plot_loss_history([{"l_spatial": np.nan, "l_org_temp": v, "l_ad_temp": np.nan} for v in losses],
                             path, window)


def plot_filmstrip(video, path: str | Path, title: str = "") -> Path:
    """Frames of one or more clips side by side; ``video`` is (f, h, w, c) or (b, f, h, w, c)."""
    v = np.asarray(video.detach().cpu() if hasattr(video, "detach") else video, dtype=float)
    if v.ndim == 4:
        v = v[None]
    b, f = v.shape[:2]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(b, f, figsize=(0.9 * f, 0.9 * b + 0.3), squeeze=False)
        for i in range(b):
            for k in range(f):
                axes[i, k].imshow(np.clip((v[i, k] + 1) / 2, 0, 1), interpolation="nearest")
                axes[i, k].set_axis_off()
        if title:
            fig.suptitle(title)
    return save_figure(fig, path)


def plot_probe(report, path: str | Path) -> Path:
    """Scatter of frame points per clip with frame-order polylines, before and after debiasing."""
    nt = len(report.t_grid)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, nt, figsize=(2.6 * nt, 5.0), squeeze=False)
        for j, t in enumerate(report.t_grid):
            for row, (geo, name) in enumerate(((report.before[j], "raw"), (report.after[j], f"debiased, beta={report.beta:g}"))):
                ax = axes[row, j]
                for c, pts in enumerate(geo["coords"]):
                    color = CLIP_COLORS[c % len(CLIP_COLORS)]
                    ax.plot(pts[:, 0], pts[:, 1], "-o", ms=2.5, lw=0.8, color=color, label=report.labels[c])
                ax.set_title(f"t={t} ({name})")
                ax.set_xticks([])
                ax.set_yticks([])
        axes[0, 0].legend(frameon=False, loc="best")
    return save_figure(fig, path)


def plot_eval_summary(summary: dict, path: str | Path) -> Path:
    arms = sorted(summary)
    metrics = ("hue_match_rate", "motion_pass_rate", "mean_fidelity")
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        width = 0.8 / max(len(arms), 1)
        x = np.arange(len(metrics))
        for i, arm in enumerate(arms):
            vals = [summary[arm][m] for m in metrics]
            ax.bar(x + i * width, vals, width, label=arm)
        ax.set_xticks(x + width * (len(arms) - 1) / 2)
        ax.set_xticklabels([m.replace("_", " ") for m in metrics])
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False)
    return save_figure(fig, path)
