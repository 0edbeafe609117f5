"""Matplotlib figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def loss_curves(rows: list[dict], path: str, title: str = "training loss"):
    it = np.array([r["iteration"] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("cls_loss", "box_loss", "mask_loss", "total"):
        ax.plot(it, [r[key] for r in rows], label=key, lw=2 if key == "total" else 1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def map_panels(maps: dict[str, np.ndarray], path: str, title: str = ""):
    """One panel per named 2-D map, each with its own colour scale."""
    n = len(maps)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), squeeze=False)
    for ax, (name, m) in zip(axes[0], maps.items()):
        im = ax.imshow(m, cmap="viridis")
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def gate_means(levels: list[int], means: dict[str, list[float]], path: str):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.8 / max(len(means), 1)
    x = np.arange(len(levels))
    for k, (task, vals) in enumerate(means.items()):
        ax.bar(x + k * width, vals, width, label=task)
    ax.set_xticks(x + width * (len(means) - 1) / 2, [f"P{i}" for i in levels])
    ax.set_ylabel("mean gate")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def reconciliation(rows: list[dict], path: str):
    """Bar pairs of computed vs reference values for the rows that have a reference."""
    rows = [r for r in rows if r.get("reference")]
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(rows)), 4))
    x = np.arange(len(rows))
    ours = [r["ours"] / r["reference"] for r in rows]
    ax.bar(x, ours, color=["tab:green" if r["pass"] else "tab:red" for r in rows])
    ax.axhline(1.0, color="k", lw=1)
    ax.set_xticks(x, [r["item"] for r in rows], rotation=35, ha="right", fontsize=8)
    ax.set_ylabel("computed / reference")
    fig.tight_layout()
    _save(fig, path)
