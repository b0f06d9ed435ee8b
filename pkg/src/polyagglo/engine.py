"""Agglomeration driver: bisection-model contract, modes and the multilevel pipeline."""

from __future__ import annotations

import abc
import logging
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cc

from .graph import Graph, coarsen_hem, graph_from_mesh, normalized_cut, project_partition
from .mesh import AgglomeratedMesh, Mesh, build_adjacency, compute_geometry, merge_cells

log = logging.getLogger(__name__)

MODES = ("kway", "nref", "target_size", "mult_factor", "segregated", "coarsen", "multilevel")


class AgglomerationError(RuntimeError):
    pass


def normalize_features(graph: Graph) -> np.ndarray:
    """Centroids centred, rotated onto principal axes and scaled to unit
    variance; measures scaled to sum 1; tags appended unchanged.

    The sign of each principal axis is chosen so the third moment along it is
    non-negative. Rotation is skipped when the centroid covariance is
    isotropic, since no axis is preferred then.
    """
    c = np.asarray(graph.centroids, dtype=float)
    c = c - c.mean(axis=0)
    if graph.n > 1:
        cov = c.T @ c / graph.n
        evals, evecs = np.linalg.eigh(cov)
        evals, evecs = evals[::-1], evecs[:, ::-1]
        spread = max(evals[0], 1e-300)
        if (evals[0] - evals[-1]) / spread > 1e-8:
            c = c @ evecs
        third = (c ** 3).mean(axis=0)
        scale = np.abs(c).max() ** 3 if len(c) else 1.0
        c = c * np.where(third < -1e-10 * scale, -1.0, 1.0)
        std = c.std(axis=0)
        c = c / np.where(std > 0, std, 1.0)
    cols = [c, (graph.node_weight / graph.node_weight.sum())[:, None]]
    if graph.tags is not None:
        cols.append(graph.tags[:, None])
    return np.hstack(cols)


# ----------------------------------------------------------------------
# contracts

class BisectionModel(abc.ABC):
    """A graph bisector usable by every agglomeration mode."""

    name = "model"

    def get_graph(self, mesh: Mesh, geometry=None, adjacency=None) -> Graph:
        return graph_from_mesh(mesh, geometry, adjacency)

    @abc.abstractmethod
    def bisect_graph(self, graph: Graph) -> np.ndarray:
        """Labels in {0, 1}; both sides non-empty when ``graph.n >= 2``."""

    def kway(self, graph: Graph, k: int) -> np.ndarray:
        raise AgglomerationError(f"{self.name} does not support direct k-way partitioning")


class Refiner(abc.ABC):
    @abc.abstractmethod
    def refine(self, graph: Graph, labels: np.ndarray) -> np.ndarray:
        ...


@dataclass
class AggloRequest:
    """Agglomeration mode plus its parameters.

    ``coarsen`` additionally needs ``cell_ids`` and an ``inner`` request that is
    applied to the selected cells. ``multilevel`` uses ``nref``, ``threshold``
    and ``refiner``.
    """

    mode: str
    k: int | None = None
    nref: int | None = None
    target: float | None = None
    mult_factor: float | None = None
    cell_ids: np.ndarray | None = None
    inner: "AggloRequest | None" = None
    threshold: int | None = None
    refiner: Refiner | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        need = {
            "kway": ("k",), "nref": ("nref",), "target_size": ("target",),
            "mult_factor": ("mult_factor",), "segregated": ("mult_factor",),
            "coarsen": ("cell_ids", "inner"), "multilevel": ("nref", "threshold"),
        }[self.mode]
        optional = {"refiner"} if self.mode == "multilevel" else set()
        for name in ("k", "nref", "target", "mult_factor", "cell_ids", "inner", "threshold", "refiner"):
            present = getattr(self, name) is not None
            if name in need and not present:
                raise ValueError(f"mode {self.mode} requires {name}")
            if name not in need and name not in optional and present:
                raise ValueError(f"mode {self.mode} does not take {name}")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.nref is not None and self.nref < 0:
            raise ValueError("nref must be >= 0")
        if self.target is not None and self.target <= 0:
            raise ValueError("target size must be positive")
        if self.mult_factor is not None and not 0 < self.mult_factor < 1:
            raise ValueError("mult_factor must lie in (0, 1)")
        if self.threshold is not None and self.threshold < 2:
            raise ValueError("threshold must be >= 2")


@dataclass(frozen=True)
class Split:
    parent: int
    children: tuple[int, int]
    depth: int
    size: int


@dataclass
class AggloResult:
    labels: np.ndarray
    mesh: AgglomeratedMesh
    hierarchy: list[Split] = field(default_factory=list)
    part_labels: np.ndarray | None = None
    top_split: np.ndarray | None = None
    graph: Graph | None = None
    top_graph: Graph | None = None

    @property
    def n_elements(self) -> int:
        return self.mesh.n_elements

    def top_level_nc(self) -> float | None:
        """NC of the first bisection (on the selected subgraph in coarsen mode)."""
        g = self.top_graph if self.top_graph is not None else self.graph
        if self.top_split is None or g is None:
            return None
        return normalized_cut(g, self.top_split)


class _Recorder:
    def __init__(self):
        self.splits: list[Split] = []
        self.top_split: np.ndarray | None = None
        self.top_graph: Graph | None = None


# ----------------------------------------------------------------------
# recursive drivers

def _is_proper(lab: np.ndarray) -> bool:
    return len(lab) >= 2 and lab.min() == 0 and lab.max() == 1


def _recursive_bisection(graph: Graph, model: BisectionModel, should_split, on_improper: str,
                         recorder: _Recorder | None = None) -> np.ndarray:
    """Worklist bisection; ``should_split(nodes, depth)`` decides per part."""
    labels = np.zeros(graph.n, dtype=np.int64)
    queue = deque([(0, np.arange(graph.n), 0)])
    next_id = 1
    leaves = []
    while queue:
        pid, nodes, depth = queue.popleft()
        if len(nodes) < 2 or not should_split(nodes, depth):
            leaves.append((pid, nodes))
            continue
        sub = graph if len(nodes) == graph.n else graph.subgraph(nodes)
        lab = np.asarray(model.bisect_graph(sub), dtype=np.int64)
        if not _is_proper(lab):
            if on_improper == "raise":
                raise AgglomerationError(f"model returned an empty side for a part of {len(nodes)} nodes")
            warnings.warn(f"model returned an empty side for a part of {len(nodes)} nodes; emitting it unsplit")
            leaves.append((pid, nodes))
            continue
        if recorder is not None:
            if depth == 0:
                recorder.top_split = lab.copy()
                recorder.top_graph = sub
            recorder.splits.append(Split(pid, (next_id, next_id + 1), depth, len(nodes)))
        queue.append((next_id, nodes[lab == 0], depth + 1))
        queue.append((next_id + 1, nodes[lab == 1], depth + 1))
        next_id += 2
    leaves.sort(key=lambda t: t[0])
    for k, (_, nodes) in enumerate(leaves):
        labels[nodes] = k
    return labels


def bisect_nref(graph: Graph, model: BisectionModel, nref: int, recorder: _Recorder | None = None) -> np.ndarray:
    if nref < 0:
        raise ValueError("nref must be >= 0")
    return _recursive_bisection(graph, model, lambda nodes, depth: depth < nref, "warn", recorder)


def bisect_target(graph: Graph, model: BisectionModel, target: float,
                  recorder: _Recorder | None = None) -> np.ndarray:
    """Bisect every part whose vertex diameter exceeds ``target``."""
    return _recursive_bisection(graph, model, lambda nodes, depth: graph.region_diameter(nodes) > target,
                                "raise", recorder)


def bisect_mult_factor(graph: Graph, model: BisectionModel, mult_factor: float,
                       recorder: _Recorder | None = None) -> np.ndarray:
    if not 0 < mult_factor < 1:
        raise ValueError("mult_factor must lie in (0, 1)")
    return bisect_target(graph, model, graph.region_diameter() * mult_factor, recorder)


def segregated(graph: Graph, model: BisectionModel, mult_factor: float,
               recorder: _Recorder | None = None) -> np.ndarray:
    """Partition each physical group on its own with a size bound fixed from the whole mesh."""
    if graph.tags is None:
        raise ValueError("segregated mode needs physical tags")
    target = graph.region_diameter() * mult_factor
    labels = np.zeros(graph.n, dtype=np.int64)
    offset = 0
    for tag in np.unique(graph.tags):
        nodes = np.flatnonzero(graph.tags == tag)
        if len(nodes) == 0:
            continue
        sub_lab = bisect_target(graph.subgraph(nodes), model, target)
        labels[nodes] = sub_lab + offset
        offset += int(sub_lab.max()) + 1
    return labels


def kway(graph: Graph, model: BisectionModel, k: int) -> np.ndarray:
    if k > graph.n:
        raise ValueError(f"k={k} exceeds the number of cells ({graph.n})")
    return np.asarray(model.kway(graph, k), dtype=np.int64)


def recursive_kway(graph: Graph, bisect, k: int) -> np.ndarray:
    """k parts by recursive bisection with proportional part counts.

    ``bisect(graph, fraction)`` must return a proper bisection with roughly
    ``fraction`` of the node weight on side 1.
    """
    if k > graph.n:
        raise ValueError(f"k={k} exceeds the number of cells ({graph.n})")
    labels = np.zeros(graph.n, dtype=np.int64)
    queue = deque([(np.arange(graph.n), k)])
    leaves = []
    while queue:
        nodes, kp = queue.popleft()
        if kp == 1:
            leaves.append(nodes)
            continue
        if kp == len(nodes):
            leaves.extend(nodes[i:i + 1] for i in range(len(nodes)))
            continue
        sub = graph.subgraph(nodes)
        lab = bisect(sub, (kp - kp // 2) / kp)
        n0, n1 = int((lab == 0).sum()), int((lab == 1).sum())
        w0 = sub.node_weight[lab == 0].sum() / sub.node_weight.sum()
        k0 = int(np.clip(round(kp * w0), max(1, kp - n1), min(n0, kp - 1)))
        queue.append((nodes[lab == 0], k0))
        queue.append((nodes[lab == 1], kp - k0))
    for i, nodes in enumerate(leaves):
        labels[nodes] = i
    return labels


# ----------------------------------------------------------------------
# multilevel

def multilevel_bisect(graph: Graph, coarse_model: BisectionModel, refiner: Refiner | None,
                      threshold: int, trace: list | None = None) -> np.ndarray:
    """Coarsen to ``threshold`` nodes, bisect, then project and refine level by level.

    If ``trace`` is a list, ``(level, nc_projected, nc_refined)`` is appended
    for every uncoarsening step.
    """
    if threshold < 2:
        raise ValueError("threshold must be >= 2")
    levels = []
    g = graph
    while g.n > threshold:
        coarse, cmap = coarsen_hem(g, level=len(levels) + 1)
        if coarse.n >= g.n:
            break
        levels.append((g, cmap))
        g = coarse
    lab = np.asarray(coarse_model.bisect_graph(g), dtype=np.int64)
    for fine, cmap in reversed(levels):
        projected = project_partition(lab, cmap)
        lab = projected if refiner is None else np.asarray(refiner.refine(fine, projected), dtype=np.int64)
        if trace is not None:
            trace.append((cmap.level, _safe_nc(fine, projected), _safe_nc(fine, lab)))
    return lab


def _safe_nc(graph: Graph, labels) -> float:
    if len(np.unique(labels)) < 2:
        return 0.0
    return normalized_cut(graph, labels)


class MultilevelBisector(BisectionModel):
    """Wraps a coarse bisector and a refiner into a plain bisection model."""

    name = "multilevel"

    def __init__(self, coarse_model: BisectionModel, refiner: Refiner | None, threshold: int):
        self.coarse_model, self.refiner, self.threshold = coarse_model, refiner, threshold

    def get_graph(self, mesh, geometry=None, adjacency=None):
        return self.coarse_model.get_graph(mesh, geometry, adjacency)

    def bisect_graph(self, graph: Graph) -> np.ndarray:
        return multilevel_bisect(graph, self.coarse_model, self.refiner, self.threshold)


# ----------------------------------------------------------------------
# connectivity and dispatch

def split_disconnected(graph: Graph, labels) -> np.ndarray:
    """One label per connected piece of each class, numbered by (label, smallest node)."""
    labels = np.asarray(labels, dtype=np.int64)
    a = graph.adjacency.tocoo()
    keep = labels[a.row] == labels[a.col]
    inside = sp.csr_matrix((np.ones(int(keep.sum())), (a.row[keep], a.col[keep])), shape=a.shape)
    _, comp = _cc(inside, directed=False)
    first = np.full(comp.max() + 1, graph.n, dtype=np.int64)
    np.minimum.at(first, comp, np.arange(graph.n))
    order = np.lexsort((first, labels[first]))
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank[comp]


def coarsen_subset(graph: Graph, model: BisectionModel, request: AggloRequest, cell_ids,
                   recorder: _Recorder | None = None) -> np.ndarray:
    """Agglomerate only ``cell_ids``; other cells stay singletons."""
    cell_ids = np.unique(np.asarray(cell_ids, dtype=np.int64))
    labels = np.arange(graph.n, dtype=np.int64)
    if len(cell_ids) == 0:
        return labels
    if cell_ids.min() < 0 or cell_ids.max() >= graph.n:
        raise ValueError("cell ids out of range")
    sub = graph if len(cell_ids) == graph.n else graph.subgraph(cell_ids)
    sub_lab = dispatch(sub, model, request, recorder)
    outside = np.setdiff1d(np.arange(graph.n), cell_ids)
    labels[cell_ids] = sub_lab
    labels[outside] = sub_lab.max() + 1 + np.arange(len(outside))
    return labels


def dispatch(graph: Graph, model: BisectionModel, request: AggloRequest,
             recorder: _Recorder | None = None) -> np.ndarray:
    mode = request.mode
    if mode == "kway":
        return kway(graph, model, request.k)
    if mode == "nref":
        return bisect_nref(graph, model, request.nref, recorder)
    if mode == "target_size":
        return bisect_target(graph, model, request.target, recorder)
    if mode == "mult_factor":
        return bisect_mult_factor(graph, model, request.mult_factor, recorder)
    if mode == "segregated":
        return segregated(graph, model, request.mult_factor, recorder)
    if mode == "coarsen":
        return coarsen_subset(graph, model, request.inner, request.cell_ids, recorder)
    if mode == "multilevel":
        ml = MultilevelBisector(model, request.refiner, request.threshold)
        return bisect_nref(graph, ml, request.nref, recorder)
    raise ValueError(f"unknown mode {mode!r}")


def agglomerate(mesh: Mesh, model: BisectionModel, request: AggloRequest) -> AggloResult:
    geometry = compute_geometry(mesh)
    adjacency = build_adjacency(mesh)
    graph = model.get_graph(mesh, geometry, adjacency)
    recorder = _Recorder()
    parts = dispatch(graph, model, request, recorder)
    labels = split_disconnected(graph, parts)
    if labels.max() + 1 > parts.max() + 1:
        log.info("connectivity check split %d parts into %d", parts.max() + 1, labels.max() + 1)
    merged = merge_cells(mesh, labels, geometry, adjacency)
    return AggloResult(labels, merged, recorder.splits, parts, recorder.top_split, graph, recorder.top_graph)
