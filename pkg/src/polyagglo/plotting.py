"""Figures written to files (non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import PolyCollection  # noqa: E402

from .mesh import AgglomeratedMesh, boundary_loops  # noqa: E402


def _save(fig, path) -> None:
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def plot_quality(columns: dict, path, title: str = "") -> None:
    """Boxplot per metric, all on the [0, 1] scale."""
    names = list(columns)
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.5))
    ax.boxplot([np.asarray(columns[n]) for n in names], tick_labels=names)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("value")
    if title:
        ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)


def plot_quality_groups(groups: dict, metric: str, path) -> None:
    """One box per group (e.g. per model) for a single metric."""
    names = list(groups)
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.5))
    ax.boxplot([np.asarray(groups[n]) for n in names], tick_labels=names)
    ax.set_ylim(0, 1.05)
    ax.set_title(metric)
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)


def plot_history(history, path, ylabel: str = "loss") -> None:
    """Training (and validation, when present) curve against epoch."""
    h = np.asarray(history, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(h[:, 0], h[:, 1], label="train")
    if h.shape[1] > 2 and np.isfinite(h[:, 2]).any():
        ax.plot(h[:, 0], h[:, 2], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend()
    _save(fig, path)


def plot_agglomeration(agg: AgglomeratedMesh, path, max_elements: int = 20000) -> None:
    """Fill each 2D element with a colour and draw element boundaries."""
    if agg.dim != 2:
        raise ValueError("only 2D agglomerations can be drawn")
    verts = agg.vertices
    rng = np.random.default_rng(0)
    colors = rng.random((agg.n_elements, 3)) * 0.6 + 0.35
    fine_polys = [verts[list(c.vertex_ids)] for c in agg.fine.cells]
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.add_collection(PolyCollection(fine_polys, facecolors=colors[agg.labels], edgecolors="none"))
    if agg.n_elements <= max_elements:
        for el in agg.elements:
            for loop, _ in boundary_loops(verts, el.boundary_faces):
                xy = verts[loop + [loop[0]]]
                ax.plot(xy[:, 0], xy[:, 1], color="k", lw=0.6)
    ax.set_aspect("equal")
    ax.autoscale_view()
    ax.set_axis_off()
    _save(fig, path)
