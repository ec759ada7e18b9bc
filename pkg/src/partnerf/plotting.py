"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRIC_LABELS = {"psnr": "PSNR (dB)", "ssim": "SSIM", "lpips_star": "LPIPS*"}


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_loss_curve(rows: list[dict], path, window: int = 50) -> Path:
    """Per-term training losses on a log axis, with a moving average of the total."""
    from .train import moving_average

    steps = np.array([int(r["step"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key, label in (("total", "total"), ("L_mse", "mse"), ("L_perc", "perceptual"), ("L_consis", "consistency")):
        vals = [r.get(key, "") for r in rows]
        if not vals or any(v in ("", None) for v in vals):
            continue
        v = np.asarray(vals, dtype=np.float64)
        ax.plot(steps, v, lw=0.6, alpha=0.45 if key == "total" else 0.8, label=label)
        if key == "total" and len(v) >= window:
            ax.plot(steps[window - 1 :], moving_average(v, window), color="k", lw=1.2, label=f"total ({window}-step mean)")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    return _finish(fig, path)


def plot_metrics(report: dict, path) -> Path:
    """One panel per metric, bars per image plus a dashed mean line."""
    rows = report["rows"]
    labels = [str(r["image"]) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key in zip(axes, ("psnr", "ssim", "lpips_star")):
        vals = [r[key] for r in rows]
        ax.bar(labels, vals, color="tab:blue")
        ax.axhline(report["mean"][key], color="k", ls="--", lw=1)
        ax.set_title(METRIC_LABELS[key])
        ax.tick_params(axis="x", labelsize=6, rotation=90)
    fig.suptitle(f"{report['split']} (perceptual backend {report['backend']})", fontsize=9)
    return _finish(fig, path)


def plot_comparison_grid(pairs: list[tuple[np.ndarray, np.ndarray]], path, titles: list[str] | None = None) -> Path:
    """Rows of (render, ground truth, absolute error)."""
    n = max(len(pairs), 1)
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for i, (pred, gt) in enumerate(pairs):
        err = np.abs(np.asarray(pred, np.float64) - np.asarray(gt, np.float64)).mean(-1)
        for j, (img, name) in enumerate(((pred, "render"), (gt, "ground truth"), (err, "|error|"))):
            ax = axes[i, j]
            if img.ndim == 2:
                ax.imshow(img, cmap="magma", vmin=0.0, vmax=max(float(img.max()), 1e-6))
            else:
                ax.imshow(np.clip(img, 0, 1))
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(name, fontsize=8)
        if titles:
            axes[i, 0].set_ylabel(titles[i], fontsize=7)
    return _finish(fig, path)


def plot_ablation(reports: dict[str, dict], path) -> Path:
    """Grouped mean metrics for each trained configuration."""
    names = list(reports)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, key in zip(axes, ("psnr", "ssim", "lpips_star")):
        vals = [reports[n]["mean"][key] for n in names]
        ax.bar(names, vals, color=["tab:green" if n == "full" else "tab:orange" for n in names])
        ax.set_title(METRIC_LABELS[key])
        lo, hi = min(vals), max(vals)
        pad = 0.1 * (hi - lo) + 1e-3 * max(abs(hi), 1.0)
        ax.set_ylim(lo - pad - (0.5 if key == "psnr" else 0.0), hi + pad)
        ax.tick_params(axis="x", labelsize=7)
    return _finish(fig, path)
