"""Matplotlib figures for experiment outputs, rendered headless to PNG."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_drift(points, path: str | os.PathLike) -> None:
    d = np.array([p.drift for p in points])
    m = np.array([p.mean_ilid for p in points])
    se = np.array([p.stderr for p in points])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(d, m, yerr=se, marker="o", ms=3, capsize=2)
    ax.set_xlabel("drift d")
    ax.set_ylabel("mean iLID")
    ax.set_title("iLID as the generated cluster drifts")
    _save(fig, path)


def plot_dimension(rows, path: str | os.PathLike) -> None:
    dims = np.array([r.dim for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.errorbar(dims, [r.mean for r in rows], yerr=[r.stderr for r in rows], marker="o", ls="none",
                capsize=3, label="estimate")
    lim = [0, dims.max() * 1.15]
    ax.plot(lim, lim, "k--", lw=0.8, label="true dimension")
    ax.fill_between(lim, [0.8 * v for v in lim], [1.2 * v for v in lim], color="0.9", label="±20%")
    ax.set_xlabel("ambient dimension")
    ax.set_ylabel("mean LID estimate")
    ax.legend(loc="upper left")
    _save(fig, path)


def plot_ablation(rows, path: str | os.PathLike) -> None:
    li = sorted({r.lambda_I for r in rows})
    lp = sorted({r.lambda_P for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    for ax, metric in zip(axes, ("psnr", "ssim")):
        grid = np.full((len(li), len(lp)), np.nan)
        for r in rows:
            grid[li.index(r.lambda_I), lp.index(r.lambda_P)] = getattr(r, metric)
        im = ax.imshow(grid, cmap="viridis", aspect="auto")
        for (i, j), v in np.ndenumerate(grid):
            ax.text(j, i, f"{v:.3f}", ha="center", va="center", color="w", fontsize=8)
        ax.set_xticks(range(len(lp)), [f"{v:g}" for v in lp])
        ax.set_yticks(range(len(li)), [f"{v:g}" for v in li])
        ax.set_xlabel("lambda_P")
        ax.set_ylabel("lambda_I")
        ax.set_title(metric.upper())
        fig.colorbar(im, ax=ax)
    _save(fig, path)


def plot_trajectory(rows, keys, path: str | os.PathLike, x_key: str = "step") -> None:
    """One panel per key of a list-of-dicts log."""
    fig, axes = plt.subplots(len(keys), 1, figsize=(5, 1.8 * len(keys)), sharex=True, squeeze=False)
    x = [r[x_key] for r in rows]
    for ax, key in zip(axes[:, 0], keys):
        ax.plot(x, [r[key] for r in rows], lw=1)
        ax.set_ylabel(key)
    axes[-1, 0].set_xlabel(x_key)
    _save(fig, path)
