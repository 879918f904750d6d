"""PNG figures written next to the CSV/PGM outputs.

Uses the non-interactive Agg backend so it works headless.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the files byte-stable across runs
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_history(history, path) -> Path:
    """Loss curves from ``(iteration, L_re, L_adv, penalty)`` rows."""
    h = np.asarray(history, dtype=np.float64).reshape(-1, 4)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    for ax, col, title in zip(axes, (1, 2, 3), ("L_re", "L_adv", "gradient penalty")):
        ax.plot(h[:, 0], h[:, col], lw=0.8)
        ax.set_title(title)
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_abundance_maps(abundances, path, truth=None) -> Path:
    """Estimated maps in the top row, ground truth (if given) below."""
    y = np.asarray(abundances)
    k = y.shape[2]
    rows = 2 if truth is not None else 1
    fig, axes = plt.subplots(rows, k, figsize=(2.4 * k, 2.4 * rows), squeeze=False)
    for m in range(k):
        axes[0, m].imshow(y[:, :, m], cmap="gray", vmin=0, vmax=1)
        axes[0, m].set_title(f"material {m}")
        if truth is not None:
            axes[1, m].imshow(np.asarray(truth)[:, :, m], cmap="gray", vmin=0, vmax=1)
            axes[1, m].set_title(f"truth {m}")
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def plot_pca(proj, path, labels=None) -> Path:
    p = np.asarray(proj)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    c = None if labels is None else np.asarray(labels)
    sc = ax.scatter(p[:, 0], p[:, 1], s=3, c=c, cmap="viridis")
    if c is not None:
        fig.colorbar(sc, ax=ax, label="dominant material")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    fig.tight_layout()
    return _save(fig, path)


def plot_rmse_runs(values, path) -> Path:
    v = np.asarray(values, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar(np.arange(len(v)), v)
    ax.axhline(v.mean() if len(v) else 0.0, color="k", lw=0.8, ls="--")
    ax.set_xlabel("run")
    ax.set_ylabel("RMSE")
    fig.tight_layout()
    return _save(fig, path)
