"""Mesh data model, cell geometry, dual adjacency extraction and cell merging."""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull, QhullError

POLYGON = "polygon"
TETRAHEDRON = "tetrahedron"
HEXAHEDRON = "hexahedron"
PYRAMID = "pyramid"
POLYHEDRON = "polyhedron"

CELL_KINDS = (POLYGON, TETRAHEDRON, HEXAHEDRON, PYRAMID, POLYHEDRON)

# Local face loops in VTK vertex ordering, consistently oriented.
_FACE_TEMPLATES = {
    TETRAHEDRON: ((0, 2, 1), (0, 1, 3), (1, 2, 3), (0, 3, 2)),
    HEXAHEDRON: (
        (0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4),
        (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7),
    ),
    PYRAMID: ((0, 3, 2, 1), (0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)),
}
_VERTEX_COUNT = {TETRAHEDRON: 4, HEXAHEDRON: 8, PYRAMID: 5}


class MeshError(ValueError):
    pass


class DegenerateCellError(MeshError):
    def __init__(self, cell_index: int, measure: float = 0.0):
        super().__init__(f"cell {cell_index} is degenerate (measure {measure:.3g})")
        self.cell_index = cell_index


class NonManifoldFaceError(MeshError):
    def __init__(self, face: tuple, cells: Sequence[int]):
        super().__init__(f"face {face} is shared by {len(cells)} cells: {list(cells)}")
        self.face = face
        self.cells = list(cells)


class DisconnectedElementError(MeshError):
    def __init__(self, label: int, n_components: int):
        super().__init__(
            f"label {label} induces {n_components} face-connected components; "
            "split disconnected classes before merging"
        )
        self.label = label


class Cell:
    """One mesh cell.

    ``face_loops`` keeps each face's vertices in traversal order (edges in 2D);
    ``faces`` holds the canonical sorted tuples used for face identity.
    """

    __slots__ = ("kind", "vertex_ids", "face_loops", "faces")

    def __init__(self, kind: str, vertex_ids: Sequence[int], face_loops: Sequence[Sequence[int]]):
        if kind not in CELL_KINDS:
            raise MeshError(f"unknown cell kind {kind!r}")
        self.kind = kind
        self.vertex_ids = tuple(int(v) for v in vertex_ids)
        self.face_loops = tuple(tuple(int(v) for v in f) for f in face_loops)
        self.faces = tuple(tuple(sorted(f)) for f in self.face_loops)

    @classmethod
    def polygon(cls, vertex_ids: Sequence[int]) -> "Cell":
        ids = tuple(int(v) for v in vertex_ids)
        n = len(ids)
        return cls(POLYGON, ids, [(ids[i], ids[(i + 1) % n]) for i in range(n)])

    @classmethod
    def solid(cls, kind: str, vertex_ids: Sequence[int]) -> "Cell":
        ids = tuple(int(v) for v in vertex_ids)
        if len(ids) != _VERTEX_COUNT[kind]:
            raise MeshError(f"{kind} needs {_VERTEX_COUNT[kind]} vertices, got {len(ids)}")
        return cls(kind, ids, [tuple(ids[i] for i in f) for f in _FACE_TEMPLATES[kind]])

    @classmethod
    def polyhedron(cls, face_loops: Sequence[Sequence[int]]) -> "Cell":
        seen: dict[int, None] = {}
        for f in face_loops:
            for v in f:
                seen.setdefault(int(v), None)
        return cls(POLYHEDRON, list(seen), face_loops)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Cell):
            return NotImplemented
        return (self.kind, self.vertex_ids, self.face_loops) == (
            other.kind, other.vertex_ids, other.face_loops)

    def __hash__(self) -> int:
        return hash((self.kind, self.vertex_ids, self.face_loops))

    def __repr__(self) -> str:
        return f"Cell({self.kind}, {list(self.vertex_ids)})"


class Mesh:
    """Polytopal mesh: vertex coordinates, cells and optional per-cell tags.

    Polygon cells are re-wound counter-clockwise on construction so that
    boundary edges of merged elements come out consistently oriented.
    """

    def __init__(self, vertices, cells: Sequence[Cell], physical_tags=None):
        verts = np.array(vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] not in (2, 3):
            raise MeshError("vertices must be an (n, 2) or (n, 3) array")
        self.dim = verts.shape[1]
        verts.setflags(write=False)
        self.vertices = verts
        self.cells = list(cells)
        if physical_tags is not None:
            tags = np.asarray(physical_tags, dtype=float).copy()
            if tags.shape != (len(cells),):
                raise MeshError("physical_tags must hold one value per cell")
            tags.setflags(write=False)
            self.physical_tags = tags
        else:
            self.physical_tags = None
        self.validate()
        if self.dim == 2:
            self.cells = _wind_polygons_ccw(verts, self.cells)

    @classmethod
    def from_polygons(cls, vertices, polygons, physical_tags=None) -> "Mesh":
        return cls(vertices, [Cell.polygon(p) for p in polygons], physical_tags)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def validate(self) -> None:
        nv = len(self.vertices)
        for i, c in enumerate(self.cells):
            if self.dim == 2 and c.kind != POLYGON:
                raise MeshError(f"cell {i}: {c.kind} in a 2D mesh")
            if self.dim == 3 and c.kind == POLYGON:
                raise MeshError(f"cell {i}: polygon in a 3D mesh")
            if len(c.vertex_ids) < self.dim + 1:
                raise MeshError(f"cell {i} has {len(c.vertex_ids)} vertices, needs >= {self.dim + 1}")
            if min(c.vertex_ids) < 0 or max(c.vertex_ids) >= nv:
                raise MeshError(f"cell {i} references a vertex out of range")

    def with_tags(self, physical_tags) -> "Mesh":
        return Mesh(self.vertices, self.cells, physical_tags)

    def subset(self, cell_ids) -> "Mesh":
        """Mesh restricted to ``cell_ids`` with unused vertices dropped."""
        cell_ids = np.asarray(cell_ids, dtype=int)
        used = sorted({v for i in cell_ids for v in self.cells[i].vertex_ids})
        remap = {v: k for k, v in enumerate(used)}
        cells = []
        for i in cell_ids:
            c = self.cells[i]
            cells.append(Cell(c.kind, [remap[v] for v in c.vertex_ids],
                              [[remap[v] for v in f] for f in c.face_loops]))
        tags = None if self.physical_tags is None else self.physical_tags[cell_ids]
        return Mesh(self.vertices[used], cells, tags)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mesh):
            return NotImplemented
        if self.dim != other.dim or self.vertices.shape != other.vertices.shape:
            return False
        if not np.array_equal(self.vertices, other.vertices) or self.cells != other.cells:
            return False
        if (self.physical_tags is None) != (other.physical_tags is None):
            return False
        return self.physical_tags is None or np.array_equal(self.physical_tags, other.physical_tags)

    def __repr__(self) -> str:
        return f"Mesh(dim={self.dim}, vertices={self.n_vertices}, cells={self.n_cells})"


def _wind_polygons_ccw(verts: np.ndarray, cells: list[Cell]) -> list[Cell]:
    out = []
    for c in cells:
        if c.kind == POLYGON and _shoelace(verts[list(c.vertex_ids)]) < 0:
            c = Cell.polygon(c.vertex_ids[::-1])
        out.append(c)
    return out


def _shoelace(p: np.ndarray) -> float:
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


# --------------------------------------------------------------------------
# geometry

@dataclass(frozen=True)
class CellGeometry:
    centroid: np.ndarray
    measure: float
    diameter: float


class GeometryTable(Sequence):
    """Per-cell centroids, measures and diameters stored column-wise."""

    def __init__(self, centroids: np.ndarray, measures: np.ndarray, diameters: np.ndarray):
        self.centroids = centroids
        self.measures = measures
        self.diameters = diameters

    def __len__(self) -> int:
        return len(self.measures)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        return CellGeometry(self.centroids[i].copy(), float(self.measures[i]), float(self.diameters[i]))

    def __iter__(self) -> Iterator[CellGeometry]:
        for i in range(len(self)):
            yield self[i]


def compute_geometry(mesh: Mesh) -> GeometryTable:
    n = mesh.n_cells
    centroids = np.zeros((n, mesh.dim))
    measures = np.zeros(n)
    diameters = np.zeros(n)
    verts = mesh.vertices

    groups: dict[tuple, list[int]] = defaultdict(list)
    for i, c in enumerate(mesh.cells):
        key = (c.kind, len(c.vertex_ids)) if c.kind != POLYHEDRON else (POLYHEDRON, i)
        groups[key].append(i)

    for (kind, _), idx in groups.items():
        idx = np.asarray(idx)
        if kind == POLYHEDRON:
            for i in idx:
                m, cen = polyhedron_volume_centroid(verts, mesh.cells[i].face_loops)
                measures[i], centroids[i] = m, cen
                diameters[i] = point_set_diameter(verts[list(mesh.cells[i].vertex_ids)])
            continue
        ids = np.array([mesh.cells[i].vertex_ids for i in idx])
        pts = verts[ids]  # (m, k, d)
        if kind == POLYGON:
            m, cen = _polygon_area_centroid_batch(pts)
        else:
            m, cen = _solid_volume_centroid_batch(pts, _FACE_TEMPLATES[kind])
        measures[idx] = m
        centroids[idx] = cen
        diff = pts[:, :, None, :] - pts[:, None, :, :]
        diameters[idx] = np.sqrt((diff ** 2).sum(-1)).max(axis=(1, 2))

    bad = np.flatnonzero(~(measures > 1e-14 * np.maximum(diameters, 1e-300) ** mesh.dim))
    if len(bad):
        raise DegenerateCellError(int(bad[0]), float(measures[bad[0]]))
    return GeometryTable(centroids, measures, diameters)


def _polygon_area_centroid_batch(pts: np.ndarray):
    x, y = pts[..., 0], pts[..., 1]
    xn, yn = np.roll(x, -1, axis=1), np.roll(y, -1, axis=1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum(axis=1)
    safe = np.where(a == 0, 1.0, a)
    cx = ((x + xn) * cross).sum(axis=1) / (6 * safe)
    cy = ((y + yn) * cross).sum(axis=1) / (6 * safe)
    return np.abs(a), np.stack([cx, cy], axis=1)


def _solid_volume_centroid_batch(pts: np.ndarray, templates):
    origin = pts.mean(axis=1)  # (m, 3)
    vol = np.zeros(len(pts))
    moment = np.zeros((len(pts), 3))
    for face in templates:
        for k in range(1, len(face) - 1):
            a = pts[:, face[0]] - origin
            b = pts[:, face[k]] - origin
            c = pts[:, face[k + 1]] - origin
            v = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
            vol += v
            moment += v[:, None] * (a + b + c) / 4.0
    safe = np.where(vol == 0, 1.0, vol)
    return np.abs(vol), origin + moment / safe[:, None]


def orient_face_loops(face_loops: Sequence[Sequence[int]]) -> list[tuple[int, ...]]:
    """Re-orient face loops so shared edges are traversed in opposite directions."""
    loops = [tuple(f) for f in face_loops]
    edge_faces: dict[tuple, list[int]] = defaultdict(list)
    for fi, f in enumerate(loops):
        for k in range(len(f)):
            a, b = f[k], f[(k + 1) % len(f)]
            edge_faces[(min(a, b), max(a, b))].append(fi)
    flipped = [None] * len(loops)
    for start in range(len(loops)):
        if flipped[start] is not None:
            continue
        flipped[start] = False
        queue = deque([start])
        while queue:
            fi = queue.popleft()
            f = loops[fi][::-1] if flipped[fi] else loops[fi]
            for k in range(len(f)):
                a, b = f[k], f[(k + 1) % len(f)]
                for gj in edge_faces[(min(a, b), max(a, b))]:
                    if gj == fi or flipped[gj] is not None:
                        continue
                    g = loops[gj]
                    same = any(g[t] == a and g[(t + 1) % len(g)] == b for t in range(len(g)))
                    flipped[gj] = same
                    queue.append(gj)
    return [f[::-1] if fl else f for f, fl in zip(loops, flipped)]


def polyhedron_volume_centroid(verts: np.ndarray, face_loops) -> tuple[float, np.ndarray]:
    loops = orient_face_loops(face_loops)
    ids = sorted({v for f in loops for v in f})
    origin = verts[ids].mean(axis=0)
    vol = 0.0
    moment = np.zeros(3)
    for f in loops:
        p = verts[list(f)] - origin
        for k in range(1, len(f) - 1):
            v = float(np.dot(p[0], np.cross(p[k], p[k + 1]))) / 6.0
            vol += v
            moment += v * (p[0] + p[k] + p[k + 1]) / 4.0
    if vol == 0:
        return 0.0, origin
    return abs(vol), origin + moment / vol


def point_set_diameter(points: np.ndarray) -> float:
    """Largest pairwise distance; convex-hull pre-filter above 1000 points."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    if len(pts) > 1000:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except (QhullError, ValueError):
            pass
    best = 0.0
    chunk = 2048
    for s in range(0, len(pts), chunk):
        block = pts[s:s + chunk]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def face_measure(verts: np.ndarray, loop: Sequence[int]) -> float:
    """Length of an edge (2 vertices) or area of a planar-ish polygonal face."""
    p = verts[list(loop)]
    if len(loop) == 2:
        return float(np.linalg.norm(p[1] - p[0]))
    acc = np.zeros(3)
    for k in range(1, len(p) - 1):
        acc += np.cross(p[k] - p[0], p[k + 1] - p[0])
    return 0.5 * float(np.linalg.norm(acc))


# --------------------------------------------------------------------------
# adjacency

def face_to_cells(mesh: Mesh) -> dict[tuple, list[int]]:
    table: dict[tuple, list[int]] = defaultdict(list)
    for cell_id, cell in enumerate(mesh.cells):
        for face in cell.faces:
            table[face].append(cell_id)
    return table


def build_adjacency(mesh: Mesh) -> sp.csr_matrix:
    """Sparse symmetric 0/1 matrix of face-sharing cells via a face hash map."""
    table = face_to_cells(mesh)
    rows: list[int] = []
    cols: list[int] = []
    for i, cell in enumerate(mesh.cells):
        for face in cell.faces:
            owners = table[face]
            if len(owners) > 2:
                raise NonManifoldFaceError(face, owners)
            for j in owners:
                if j != i:
                    rows.append(i)
                    cols.append(j)
    n = mesh.n_cells
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0
    return a


# --------------------------------------------------------------------------
# merging

@dataclass
class Element:
    members: np.ndarray
    boundary_faces: list[tuple[int, ...]]
    measure: float
    boundary_measure: float
    centroid: np.ndarray
    diameter: float
    tags: np.ndarray | None = None

    def vertex_ids(self) -> np.ndarray:
        return np.unique(np.fromiter((v for f in self.boundary_faces for v in f), dtype=int))


@dataclass
class AgglomeratedMesh:
    """Agglomerated elements over a fine mesh; element ``k`` owns ``labels == k``."""

    fine: Mesh
    labels: np.ndarray
    elements: list[Element] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.fine.dim

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def vertices(self) -> np.ndarray:
        return self.fine.vertices

    def to_mesh(self) -> Mesh:
        """Mesh with one polygon (outer loop) or polyhedron per element."""
        cells = []
        for el in self.elements:
            if self.dim == 2:
                loops = boundary_loops(self.fine.vertices, el.boundary_faces)
                cells.append(Cell.polygon(loops[0][0]))
            else:
                cells.append(Cell.polyhedron(el.boundary_faces))
        tags = None
        if self.fine.physical_tags is not None:
            tags = np.array([float(np.mean(el.tags)) for el in self.elements])
        return Mesh(self.fine.vertices, cells, tags)


def boundary_loops(verts: np.ndarray, edges: Sequence[tuple[int, int]]):
    """Chain directed boundary edges into closed loops.

    Returns ``[(loop, is_hole), ...]`` with the largest-area loop first.
    """
    out_edges: dict[int, list[int]] = defaultdict(list)
    for a, b in edges:
        out_edges[a].append(b)
    remaining = len(edges)
    loops = []
    while remaining:
        start = next(v for v, nxt in out_edges.items() if nxt)
        loop = [start]
        cur = out_edges[start].pop()
        remaining -= 1
        while cur != start:
            loop.append(cur)
            if not out_edges[cur]:
                break
            cur = out_edges[cur].pop()
            remaining -= 1
        loops.append(loop)
    areas = [_shoelace(verts[lp]) if len(lp) > 2 else 0.0 for lp in loops]
    order = sorted(range(len(loops)), key=lambda k: -abs(areas[k]))
    return [(loops[k], rank > 0) for rank, k in enumerate(order)]


def class_components(adjacency: sp.csr_matrix, labels: np.ndarray) -> np.ndarray:
    """Component count per label of the label-restricted dual graph."""
    indptr, indices = adjacency.indptr, adjacency.indices
    lab = labels.tolist()
    seen = [False] * len(lab)
    counts = np.zeros(int(labels.max()) + 1, dtype=int) if len(lab) else np.zeros(0, dtype=int)
    ip, ix = indptr.tolist(), indices.tolist()
    for s in range(len(lab)):
        if seen[s]:
            continue
        counts[lab[s]] += 1
        seen[s] = True
        stack = [s]
        while stack:
            u = stack.pop()
            for k in range(ip[u], ip[u + 1]):
                v = ix[k]
                if not seen[v] and lab[v] == lab[u]:
                    seen[v] = True
                    stack.append(v)
    return counts


def merge_cells(mesh: Mesh, labels, geometry: GeometryTable | None = None,
                adjacency: sp.csr_matrix | None = None) -> AgglomeratedMesh:
    labels = np.asarray(labels)
    if labels.shape != (mesh.n_cells,):
        raise MeshError("labels must hold one entry per cell")
    _, dense = np.unique(labels, return_inverse=True)
    dense = dense.astype(int)
    geometry = geometry if geometry is not None else compute_geometry(mesh)
    adjacency = adjacency if adjacency is not None else build_adjacency(mesh)

    comps = class_components(adjacency, dense)
    bad = np.flatnonzero(comps > 1)
    if len(bad):
        raise DisconnectedElementError(int(bad[0]), int(comps[bad[0]]))

    m = int(dense.max()) + 1 if len(dense) else 0
    table = face_to_cells(mesh)
    bfaces: list[list[tuple]] = [[] for _ in range(m)]
    bmeasure = np.zeros(m)
    verts = mesh.vertices
    for i, cell in enumerate(mesh.cells):
        li = dense[i]
        for loop, key in zip(cell.face_loops, cell.faces):
            owners = table[key]
            if len(owners) == 1 or any(dense[j] != li for j in owners if j != i):
                bfaces[li].append(loop)
                bmeasure[li] += face_measure(verts, loop)

    measures = np.bincount(dense, weights=geometry.measures, minlength=m)
    order = np.argsort(dense, kind="stable")
    splits = np.cumsum(np.bincount(dense, minlength=m))[:-1]
    member_lists = np.split(order, splits)
    tags = mesh.physical_tags
    elements = []
    for k in range(m):
        members = member_lists[k]
        w = geometry.measures[members]
        cen = (geometry.centroids[members] * w[:, None]).sum(0) / w.sum()
        vids = np.unique(np.fromiter((v for i in members for v in mesh.cells[i].vertex_ids), dtype=int))
        elements.append(Element(
            members=members,
            boundary_faces=bfaces[k],
            measure=float(measures[k]),
            boundary_measure=float(bmeasure[k]),
            centroid=cen,
            diameter=point_set_diameter(verts[vids]),
            tags=None if tags is None else tags[members],
        ))
    return AgglomeratedMesh(mesh, dense, elements)
