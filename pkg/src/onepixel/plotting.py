"""Matplotlib figures written next to the CSV/PGM outputs."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "image.interpolation": "nearest",
}

# keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)


def plot_grids(grids, titles, path, suptitle: str = "", vmax: float | None = None, cmap: str = "inferno"):
    """One heatmap per layer, laid out in rows of at most four."""
    n = len(grids)
    cols = min(n, 4)
    rows = math.ceil(n / cols)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.4 * rows), squeeze=False)
        for ax in axes.flat[n:]:
            ax.axis("off")
        for ax, grid, title in zip(axes.flat, grids, titles):
            im = ax.imshow(np.asarray(grid), cmap=cmap, vmin=0.0, vmax=vmax)
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        if suptitle:
            fig.suptitle(suptitle)
        _save(fig, path)


def plot_propagation_map(pm, path, scaled_grids=None, image=None, title: str = ""):
    """Input image (optional) followed by each layer's grid.

    With ``scaled_grids`` the colour range is fixed to [0, 1], i.e. relative
    to each layer's natural maximum.
    """
    grids = list(scaled_grids) if scaled_grids is not None else [l.grid for l in pm.layers]
    titles = [f"{l.name} (layer {l.index})" for l in pm.layers]
    vmax = 1.0 if scaled_grids is not None else None
    if image is None:
        plot_grids(grids, titles, path, suptitle=title, vmax=vmax)
        return
    n = len(grids) + 1
    cols = min(n, 4)
    rows = math.ceil(n / cols)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.4 * rows), squeeze=False)
        for ax in axes.flat:
            ax.set_xticks([])
            ax.set_yticks([])
        for ax in axes.flat[n:]:
            ax.axis("off")
        axes.flat[0].imshow(np.asarray(image))
        axes.flat[0].set_title("input")
        for ax, grid, t in zip(axes.flat[1:], grids, titles):
            im = ax.imshow(np.asarray(grid), cmap="inferno", vmin=0.0, vmax=vmax)
            ax.set_title(t)
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        if title:
            fig.suptitle(title)
        _save(fig, path)


def plot_layer_curve(layer_names, success, fail, baseline, path):
    x = np.arange(len(layer_names))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(x, success, "o-", label="successful attacks")
        ax.plot(x, fail, "s--", label="failed attacks")
        ax.plot(x, baseline, "^:", label="unmodified activation")
        ax.set_xticks(x)
        ax.set_xticklabels(layer_names, rotation=45, ha="right")
        ax.set_ylabel("mean value")
        ax.set_yscale("symlog", linthresh=1e-4)
        ax.legend(frameon=False)
        _save(fig, path)


def plot_locality(report, path):
    conditions = list(report.counts)
    rates = [100.0 * report.counts[c].rate for c in conditions]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.8, 2.8))
        bars = ax.bar(range(len(conditions)), rates, color=["0.3", "0.6", "0.8"])
        for bar, c in zip(bars, conditions):
            cnt = report.counts[c]
            ax.annotate(f"{cnt.successes}/{cnt.attempts}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                        ha="center", va="bottom", fontsize=7)
        ax.set_xticks(range(len(conditions)))
        ax.set_xticklabels([c.replace("_", " ") for c in conditions])
        ax.set_ylabel("success rate (%)")
        ax.set_ylim(0, 105)
        _save(fig, path)
