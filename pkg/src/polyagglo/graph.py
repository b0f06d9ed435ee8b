"""Dual graph of a mesh and the graph quantities used by every partitioner."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import GeometryTable, Mesh, build_adjacency, compute_geometry, point_set_diameter


class ZeroVolumeError(ValueError):
    def __init__(self, subset: int):
        super().__init__(f"subset {subset} has zero volume; normalized cut is undefined")
        self.subset = subset


class CellVertices:
    """CSR lookup from cell id to vertex coordinates, used for region diameters."""

    def __init__(self, points: np.ndarray, ptr: np.ndarray, idx: np.ndarray):
        self.points = points
        self.ptr = ptr
        self.idx = idx

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "CellVertices":
        lens = np.fromiter((len(c.vertex_ids) for c in mesh.cells), dtype=np.int64, count=mesh.n_cells)
        ptr = np.zeros(mesh.n_cells + 1, dtype=np.int64)
        np.cumsum(lens, out=ptr[1:])
        idx = np.fromiter((v for c in mesh.cells for v in c.vertex_ids), dtype=np.int64, count=int(ptr[-1]))
        return cls(mesh.vertices, ptr, idx)

    def vertex_ids(self, cell_ids: np.ndarray) -> np.ndarray:
        cell_ids = np.asarray(cell_ids, dtype=np.int64)
        starts, ends = self.ptr[cell_ids], self.ptr[cell_ids + 1]
        lens = ends - starts
        offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
        return np.unique(self.idx[np.arange(lens.sum()) + offsets])

    def diameter(self, cell_ids: np.ndarray) -> float:
        return point_set_diameter(self.points[self.vertex_ids(cell_ids)])


class Graph:
    """Weighted undirected graph with per-node geometric data.

    ``node_weight`` defaults to cell measure; ``degrees`` are weighted row sums.
    ``cell_ids`` maps nodes back to cells of the originating mesh.
    """

    def __init__(self, adjacency, node_weight=None, centroids=None, tags=None,
                 cell_ids=None, cell_vertices: CellVertices | None = None):
        a = sp.csr_matrix(adjacency, dtype=float)
        a.eliminate_zeros()
        a.sort_indices()
        if a.shape[0] != a.shape[1]:
            raise ValueError("adjacency must be square")
        if a.diagonal().any():
            raise ValueError("adjacency must not contain self-loops")
        self.adjacency = a
        self.n = a.shape[0]
        self.degrees = np.asarray(a.sum(axis=1)).ravel()
        self.node_weight = (np.ones(self.n) if node_weight is None
                            else np.asarray(node_weight, dtype=float))
        if np.any(self.node_weight <= 0):
            raise ValueError("node weights must be positive")
        self.centroids = None if centroids is None else np.asarray(centroids, dtype=float)
        self.tags = None if tags is None else np.asarray(tags, dtype=float)
        self.cell_ids = np.arange(self.n) if cell_ids is None else np.asarray(cell_ids, dtype=np.int64)
        self.cell_vertices = cell_vertices
        self._lists = None
        self._mean_adj = None

    @property
    def dim(self) -> int:
        return 0 if self.centroids is None else self.centroids.shape[1]

    @property
    def features(self) -> np.ndarray:
        cols = [] if self.centroids is None else [self.centroids]
        cols.append(self.node_weight[:, None])
        if self.tags is not None:
            cols.append(self.tags[:, None])
        return np.hstack(cols)

    @property
    def n_edges(self) -> int:
        return self.adjacency.nnz // 2

    def neighbor_lists(self):
        """(indptr, indices, weights) as python lists, for tight scalar loops."""
        if self._lists is None:
            a = self.adjacency
            self._lists = (a.indptr.tolist(), a.indices.tolist(), a.data.tolist())
        return self._lists

    def mean_adjacency(self) -> sp.csr_matrix:
        """Row-normalized 0/1 pattern; isolated nodes get an all-zero row."""
        if self._mean_adj is None:
            pattern = self.adjacency.copy()
            pattern.data[:] = 1.0
            counts = np.asarray(pattern.sum(axis=1)).ravel()
            inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
            self._mean_adj = sp.csr_matrix(sp.diags(inv) @ pattern)
        return self._mean_adj

    def edges(self):
        """Upper-triangular edge arrays ``(i, j, w)``."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        return coo.row, coo.col, coo.data

    def subgraph(self, nodes) -> "Graph":
        nodes = np.asarray(nodes, dtype=np.int64)
        sub = self.adjacency[nodes][:, nodes]
        return Graph(
            sub,
            node_weight=self.node_weight[nodes],
            centroids=None if self.centroids is None else self.centroids[nodes],
            tags=None if self.tags is None else self.tags[nodes],
            cell_ids=self.cell_ids[nodes],
            cell_vertices=self.cell_vertices,
        )

    def with_centroids(self, centroids) -> "Graph":
        g = Graph(self.adjacency, self.node_weight, centroids, self.tags, self.cell_ids, self.cell_vertices)
        g._lists, g._mean_adj = self._lists, self._mean_adj
        return g

    def region_diameter(self, nodes=None) -> float:
        """Largest distance between mesh vertices of the cells behind ``nodes``."""
        if self.cell_vertices is None:
            raise ValueError("graph carries no mesh vertex data")
        cells = self.cell_ids if nodes is None else self.cell_ids[np.asarray(nodes, dtype=np.int64)]
        return self.cell_vertices.diameter(cells)

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, edges={self.n_edges})"


def graph_from_mesh(mesh: Mesh, geometry: GeometryTable | None = None,
                    adjacency: sp.csr_matrix | None = None) -> Graph:
    geometry = geometry if geometry is not None else compute_geometry(mesh)
    adjacency = adjacency if adjacency is not None else build_adjacency(mesh)
    return Graph(adjacency, node_weight=geometry.measures, centroids=geometry.centroids,
                 tags=mesh.physical_tags, cell_vertices=CellVertices.from_mesh(mesh))


def _as_mask(graph: Graph, subset) -> np.ndarray:
    subset = np.asarray(subset)
    if subset.dtype == bool:
        return subset
    mask = np.zeros(graph.n, dtype=bool)
    mask[subset.astype(np.int64)] = True
    return mask


def cut(graph: Graph, subset) -> float:
    mask = _as_mask(graph, subset)
    i, j, w = graph.edges()
    return float(w[mask[i] != mask[j]].sum())


def volume(graph: Graph, subset) -> float:
    return float(graph.degrees[_as_mask(graph, subset)].sum())


def cut_and_volumes(graph: Graph, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-label cut and volume for a labelling with ids ``0..M-1``."""
    labels = np.asarray(labels, dtype=np.int64)
    m = int(labels.max()) + 1 if len(labels) else 0
    i, j, w = graph.edges()
    crossing = labels[i] != labels[j]
    cuts = (np.bincount(labels[i][crossing], weights=w[crossing], minlength=m)
            + np.bincount(labels[j][crossing], weights=w[crossing], minlength=m))
    vols = np.bincount(labels, weights=graph.degrees, minlength=m)
    return cuts, vols


def normalized_cut(graph: Graph, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    _, dense = np.unique(labels, return_inverse=True)
    cuts, vols = cut_and_volumes(graph, dense.ravel())
    zero = np.flatnonzero(vols <= 0)
    if len(zero):
        raise ZeroVolumeError(int(np.unique(labels)[zero[0]]))
    return float((cuts / vols).sum())


def connected_components(graph: Graph, subset=None) -> list[np.ndarray]:
    """Components of the subgraph induced by ``subset`` (all nodes if None)."""
    mask = np.ones(graph.n, dtype=bool) if subset is None else _as_mask(graph, subset)
    ip, ix, _ = graph.neighbor_lists()
    inside = mask.tolist()
    seen = [False] * graph.n
    comps = []
    for s in np.flatnonzero(mask).tolist():
        if seen[s]:
            continue
        seen[s] = True
        comp = [s]
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for k in range(ip[u], ip[u + 1]):
                v = ix[k]
                if inside[v] and not seen[v]:
                    seen[v] = True
                    comp.append(v)
                    queue.append(v)
        comps.append(np.sort(np.array(comp, dtype=np.int64)))
    return comps


def hop_distances(graph: Graph, seeds, max_hops: int) -> np.ndarray:
    """BFS hop distance from ``seeds`` (-1 beyond ``max_hops``)."""
    ip, ix, _ = graph.neighbor_lists()
    dist = [-1] * graph.n
    frontier = []
    for s in np.unique(np.asarray(seeds, dtype=np.int64)).tolist():
        dist[s] = 0
        frontier.append(s)
    for depth in range(1, max_hops + 1):
        nxt = []
        for u in frontier:
            for k in range(ip[u], ip[u + 1]):
                v = ix[k]
                if dist[v] < 0:
                    dist[v] = depth
                    nxt.append(v)
        frontier = nxt
        if not frontier:
            break
    return np.array(dist, dtype=np.int64)


def k_hop_subgraph(graph: Graph, seeds, k: int) -> tuple[Graph, np.ndarray]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(np.atleast_1d(seeds)) == 0:
        raise ValueError("seeds must be non-empty")
    nodes = np.flatnonzero(hop_distances(graph, seeds, k) >= 0)
    return graph.subgraph(nodes), nodes


@dataclass(frozen=True)
class CoarseMap:
    fine_to_coarse: np.ndarray
    n_coarse: int
    level: int = 1
    dropped_edge_weight: float = 0.0


def heavy_edge_matching(graph: Graph) -> np.ndarray:
    """Greedy matching: nodes in ascending neighbor count (id tie-break) grab
    their heaviest unmatched neighbor (lowest id on weight ties).

    Returns ``match`` with ``match[u] == u`` for unmatched nodes.
    """
    ip, ix, wd = graph.neighbor_lists()
    counts = np.diff(graph.adjacency.indptr)
    order = np.lexsort((np.arange(graph.n), counts)).tolist()
    match = [-1] * graph.n
    for u in order:
        if match[u] != -1:
            continue
        best, bw = -1, -np.inf
        for k in range(ip[u], ip[u + 1]):
            v = ix[k]
            if match[v] == -1:
                w = wd[k]
                if w > bw or (w == bw and v < best):
                    best, bw = v, w
        if best >= 0:
            match[u] = best
            match[best] = u
        else:
            match[u] = u
    return np.array(match, dtype=np.int64)


def coarsen_hem(graph: Graph, level: int = 1) -> tuple[Graph, CoarseMap]:
    if graph.n < 2:
        raise ValueError("coarsening needs at least 2 nodes")
    match = heavy_edge_matching(graph)
    n = graph.n
    rep = np.minimum(np.arange(n), match)
    _, f2c = np.unique(rep, return_inverse=True)
    f2c = f2c.ravel()
    nc = int(f2c.max()) + 1
    p = sp.csr_matrix((np.ones(n), (np.arange(n), f2c)), shape=(n, nc))
    ac = (p.T @ graph.adjacency @ p).tocsr()
    dropped = float(ac.diagonal().sum()) / 2.0
    ac = (ac - sp.diags(ac.diagonal())).tocsr()
    ac.eliminate_zeros()
    w = np.bincount(f2c, weights=graph.node_weight, minlength=nc)

    def wmean(values):
        if values is None:
            return None
        vals = values if values.ndim == 2 else values[:, None]
        out = np.zeros((nc, vals.shape[1]))
        for c in range(vals.shape[1]):
            out[:, c] = np.bincount(f2c, weights=vals[:, c] * graph.node_weight, minlength=nc) / w
        return out if values.ndim == 2 else out[:, 0]

    coarse = Graph(ac, node_weight=w, centroids=wmean(graph.centroids), tags=wmean(graph.tags))
    return coarse, CoarseMap(f2c, nc, level, dropped)


def project_partition(coarse_labels, cmap: CoarseMap) -> np.ndarray:
    coarse_labels = np.asarray(coarse_labels)
    if len(coarse_labels) != cmap.n_coarse:
        raise ValueError("coarse labels do not cover the coarse graph")
    return coarse_labels[cmap.fine_to_coarse]
