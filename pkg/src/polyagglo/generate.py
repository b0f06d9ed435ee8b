"""Mesh generators for training data and tests.

All 2D generators cover the unit square; 3D generators cover (portions of)
the unit cube.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .mesh import Cell, Mesh, TETRAHEDRON, build_adjacency, compute_geometry

log = logging.getLogger(__name__)

GENERATOR_KINDS = ("structured_quads", "structured_triangles", "random_delaunay", "random_voronoi",
                   "holes", "inclusions", "cube_tets", "cube_portion")


def _grid_vertices(n: int) -> np.ndarray:
    xs = np.linspace(0.0, 1.0, n + 1)
    gx, gy = np.meshgrid(xs, xs)
    return np.column_stack([gx.ravel(), gy.ravel()])


def structured_quads(n: int) -> Mesh:
    if n < 1:
        raise ValueError("n must be >= 1")
    j, i = np.divmod(np.arange(n * n), n)
    v0 = j * (n + 1) + i
    quads = np.column_stack([v0, v0 + 1, v0 + n + 2, v0 + n + 1])
    return Mesh.from_polygons(_grid_vertices(n), quads.tolist())


def structured_triangles(n: int) -> Mesh:
    """Grid of quads, each split along the diagonal from its lower-left corner."""
    if n < 1:
        raise ValueError("n must be >= 1")
    j, i = np.divmod(np.arange(n * n), n)
    v0 = j * (n + 1) + i
    lower = np.column_stack([v0, v0 + 1, v0 + n + 2])
    upper = np.column_stack([v0, v0 + n + 2, v0 + n + 1])
    tris = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return Mesh.from_polygons(_grid_vertices(n), tris.tolist())


# ----------------------------------------------------------------------
# Delaunay

def _circumcircle(p: np.ndarray, tri) -> tuple[np.ndarray, float]:
    a, b, c = p[tri[0]], p[tri[1]], p[tri[2]]
    d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
    sa, sb, sc = a @ a, b @ b, c @ c
    ux = (sa * (b[1] - c[1]) + sb * (c[1] - a[1]) + sc * (a[1] - b[1])) / d
    uy = (sa * (c[0] - b[0]) + sb * (a[0] - c[0]) + sc * (b[0] - a[0])) / d
    center = np.array([ux, uy])
    return center, float(((a - center) ** 2).sum())


def bowyer_watson(points: np.ndarray) -> np.ndarray:
    """Delaunay triangulation of points inside the unit square.

    The first four points must be the square's corners; the two corner
    triangles seed the insertion, so no super-triangle is needed. A point is
    in conflict with a triangle only if strictly inside its circumcircle,
    which resolves cocircular ties by insertion order.
    """
    p = np.asarray(points, dtype=float)
    cap = 2 * len(p) + 8
    tris = np.zeros((cap * 2, 3), dtype=np.int64)
    centers = np.zeros((cap * 2, 2))
    rad2 = np.zeros(cap * 2)
    alive = np.zeros(cap * 2, dtype=bool)
    count = 0

    def add(t):
        nonlocal count, tris, centers, rad2, alive
        if count == len(tris):
            grow = len(tris)
            tris = np.vstack([tris, np.zeros((grow, 3), dtype=np.int64)])
            centers = np.vstack([centers, np.zeros((grow, 2))])
            rad2 = np.concatenate([rad2, np.zeros(grow)])
            alive = np.concatenate([alive, np.zeros(grow, dtype=bool)])
        tris[count] = t
        centers[count], rad2[count] = _circumcircle(p, t)
        alive[count] = True
        count += 1

    add((0, 1, 2))
    add((0, 2, 3))
    for k in range(4, len(p)):
        live = np.flatnonzero(alive[:count])
        d2 = ((centers[live] - p[k]) ** 2).sum(1)
        bad = live[d2 < rad2[live] * (1 - 1e-12)]
        if len(bad) == 0:
            continue
        edges: dict[tuple[int, int], int] = {}
        for t in bad:
            a, b, c = tris[t]
            for e in ((a, b), (b, c), (c, a)):
                key = (min(e), max(e))
                if key in edges:
                    del edges[key]
                else:
                    edges[key] = e
        alive[bad] = False
        for e in sorted(edges.values()):
            add((e[0], e[1], k))
    return tris[:count][alive[:count]]


def _unit_square_corners() -> np.ndarray:
    return np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def random_delaunay(n_points: int, seed: int = 0) -> Mesh:
    if n_points < 3:
        raise ValueError("n_points must be >= 3")
    rng = np.random.default_rng(seed)
    pts = np.vstack([_unit_square_corners(), rng.random((n_points, 2))])
    tris = bowyer_watson(pts)
    return Mesh.from_polygons(pts, tris.tolist())


# ----------------------------------------------------------------------
# Voronoi

def _clip(poly: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    """Keep the part of a convex polygon with ``normal . x <= offset``."""
    s = poly @ normal - offset
    out = []
    for k in range(len(poly)):
        a, b = poly[k], poly[(k + 1) % len(poly)]
        sa, sb = s[k], s[(k + 1) % len(poly)]
        if sa <= 0:
            out.append(a)
        if (sa < 0 < sb) or (sb < 0 < sa):
            out.append(a + (b - a) * (sa / (sa - sb)))
    return np.array(out) if out else np.zeros((0, 2))


def voronoi_cells(seeds: np.ndarray) -> list[np.ndarray]:
    """Convex Voronoi cells of ``seeds`` clipped to the unit square."""
    tree = cKDTree(seeds)
    n = len(seeds)
    cells = []
    for s in seeds:
        poly = _unit_square_corners()
        k = min(n, 32)
        done = 0
        while True:
            dist, idx = tree.query(s, k=k)
            dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
            finished = k == n
            for d, j in zip(dist[done + 1:], idx[done + 1:]):
                reach = np.sqrt(((poly - s) ** 2).sum(1)).max()
                if d > 2.0 * reach:
                    finished = True
                    break
                normal = seeds[j] - s
                poly = _clip(poly, normal, normal @ (seeds[j] + s) / 2.0)
            if finished:
                break
            done, k = k - 1, min(n, 2 * k)
        cells.append(poly)
    return cells


def _polygon_centroid(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = cross.sum() / 2.0
    return np.array([((x + xn) * cross).sum(), ((y + yn) * cross).sum()]) / (6.0 * area)


def _snap(polys: list[np.ndarray], tol: float = 1e-9) -> tuple[np.ndarray, list[list[int]]]:
    allpts = np.vstack(polys)
    pairs = cKDTree(allpts).query_pairs(tol, output_type="ndarray")
    n = len(allpts)
    g = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else \
        sp.coo_matrix((n, n))
    _, comp = connected_components(g, directed=False)
    first = np.full(comp.max() + 1, n)
    np.minimum.at(first, comp, np.arange(n))
    _, vid = np.unique(first[comp], return_inverse=True)
    verts = allpts[np.sort(np.unique(first[comp]))]
    loops, start = [], 0
    for poly in polys:
        ids = vid[start:start + len(poly)].tolist()
        start += len(poly)
        loop = [v for k, v in enumerate(ids) if v != ids[k - 1]] if len(ids) > 1 else ids
        loops.append(loop)
    return verts, loops


def random_voronoi(n_seeds: int, seed: int = 0, lloyd_iters: int = 0, history: list | None = None) -> Mesh:
    """Voronoi tessellation of uniform seeds; ``lloyd_iters`` moves seeds to
    cell centroids. ``history`` receives the max seed displacement per iteration."""
    if n_seeds < 2:
        raise ValueError("n_seeds must be >= 2")
    rng = np.random.default_rng(seed)
    seeds = rng.random((n_seeds, 2))
    cells = voronoi_cells(seeds)
    for _ in range(lloyd_iters):
        new = np.array([_polygon_centroid(c) for c in cells])
        if history is not None:
            history.append(float(np.sqrt(((new - seeds) ** 2).sum(1)).max()))
        seeds = new
        cells = voronoi_cells(seeds)
    verts, loops = _snap(cells)
    return Mesh.from_polygons(verts, loops)


# ----------------------------------------------------------------------
# tags and holes

def inclusion_radius(n_circles: int, coverage: float) -> float:
    return float(np.sqrt(coverage / (n_circles * np.pi)))


def place_circles(n_circles: int, radius: float, rng: np.random.Generator,
                  max_tries: int = 10000) -> np.ndarray:
    centers: list[np.ndarray] = []
    tries = 0
    while len(centers) < n_circles:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could not place {n_circles} disjoint circles of radius {radius:.4g}; "
                             "lower the coverage or the circle count")
        c = rng.uniform(radius, 1.0 - radius, size=2)
        if all(np.linalg.norm(c - o) >= 2.0 * radius for o in centers):
            centers.append(c)
    return np.array(centers).reshape(-1, 2)


def with_inclusions(mesh: Mesh, n_circles: int = 4, coverage: float = 0.15, seed: int = 0) -> Mesh:
    """Tag 1 for cells whose centroid falls in one of ``n_circles`` equal disjoint circles."""
    if n_circles == 0:
        return mesh.with_tags(np.zeros(mesh.n_cells))
    if not 0 < coverage < 1:
        raise ValueError("coverage must lie in (0, 1)")
    r = inclusion_radius(n_circles, coverage)
    centers = place_circles(n_circles, r, np.random.default_rng(seed))
    cen = compute_geometry(mesh).centroids
    d = np.sqrt(((cen[:, None, :] - centers[None]) ** 2).sum(2)).min(axis=1)
    return mesh.with_tags((d < r).astype(float))


def largest_component(mesh: Mesh) -> Mesh:
    n_comp, comp = connected_components(build_adjacency(mesh), directed=False)
    if n_comp <= 1:
        return mesh
    sizes = np.bincount(comp)
    return mesh.subset(np.flatnonzero(comp == np.argmax(sizes)))


def with_holes(mesh: Mesh, n_holes: int = 3, radius: float = 0.1, seed: int = 0) -> Mesh:
    """Remove cells whose centroid lies in random disjoint circles; keep the largest piece."""
    centers = place_circles(n_holes, radius, np.random.default_rng(seed))
    cen = compute_geometry(mesh).centroids
    d = np.sqrt(((cen[:, None, :] - centers[None]) ** 2).sum(2)).min(axis=1)
    return largest_component(mesh.subset(np.flatnonzero(d >= radius)))


# ----------------------------------------------------------------------
# 3D

def cube_tets(n: int) -> Mesh:
    """n^3 hexahedra, each cut into 6 tetrahedra around a main diagonal.

    Cells with odd index along an axis are mirrored in that axis so the face
    diagonals of neighbouring cells coincide.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    xs = np.linspace(0.0, 1.0, n + 1)
    gz, gy, gx = np.meshgrid(xs, xs, xs, indexing="ij")
    verts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    def vid(i, j, k):
        return (k * (n + 1) + j) * (n + 1) + i

    paths = []
    for perm in itertools.permutations(range(3)):
        corner = [0, 0, 0]
        path = [tuple(corner)]
        for ax in perm:
            corner[ax] = 1
            path.append(tuple(corner))
        paths.append(path)
    cells = []
    for k in range(n):
        for j in range(n):
            for i in range(n):
                flip = (i % 2, j % 2, k % 2)
                for path in paths:
                    ids = []
                    for c in path:
                        c = [c[a] ^ flip[a] for a in range(3)]
                        ids.append(vid(i + c[0], j + c[1], k + c[2]))
                    a, b, c_, d = verts[ids]
                    if np.dot(np.cross(b - a, c_ - a), d - a) < 0:
                        ids[1], ids[2] = ids[2], ids[1]
                    cells.append(Cell.solid(TETRAHEDRON, ids))
    return Mesh(verts, cells)


def cube_portion(seed: int = 0, n: int = 4, min_extent: float = 0.4) -> Mesh:
    """Tetrahedra of ``cube_tets(n)`` whose centroid lies in a random sub-box."""
    rng = np.random.default_rng(seed)
    lo = rng.uniform(0.0, 1.0 - min_extent, size=3)
    hi = lo + rng.uniform(min_extent, 1.0 - lo)
    full = cube_tets(n)
    cen = compute_geometry(full).centroids
    keep = np.flatnonzero(np.all((cen >= lo) & (cen <= hi), axis=1))
    if len(keep) < 2:
        keep = np.arange(full.n_cells)
    return largest_component(full.subset(keep))


# ----------------------------------------------------------------------
# datasets

DEFAULT_SIZES = {
    "structured_quads": {"n": 14},
    "structured_triangles": {"n": 10},
    "random_delaunay": {"n_points": 100},
    "random_voronoi": {"n_seeds": 200, "lloyd_iters": 0},
    "holes": {"n_points": 120, "n_holes": 3, "radius": 0.1},
    "inclusions": {"n_points": 100, "n_circles": 4, "coverage": 0.15},
    "cube_tets": {"n": 3},
    "cube_portion": {"n": 4},
}


@dataclass
class DatasetSpec:
    counts: dict[str, int]
    sizes: dict[str, dict] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for kind, count in self.counts.items():
            if kind not in GENERATOR_KINDS:
                raise ValueError(f"unknown generator {kind!r}")
            if count < 0:
                raise ValueError(f"negative count for {kind}")

    def params(self, kind: str) -> dict:
        return {**DEFAULT_SIZES[kind], **self.sizes.get(kind, {})}

    def sample_seed(self, kind: str, index: int) -> int:
        ss = np.random.SeedSequence([self.seed, GENERATOR_KINDS.index(kind), index])
        return int(ss.generate_state(1)[0])


def generate_one(kind: str, params: dict, seed: int) -> Mesh:
    if kind == "structured_quads":
        return structured_quads(params["n"])
    if kind == "structured_triangles":
        return structured_triangles(params["n"])
    if kind == "random_delaunay":
        return random_delaunay(params["n_points"], seed)
    if kind == "random_voronoi":
        return random_voronoi(params["n_seeds"], seed, params.get("lloyd_iters", 0))
    if kind == "holes":
        base = random_delaunay(params["n_points"], seed)
        return with_holes(base, params["n_holes"], params["radius"], seed + 1)
    if kind == "inclusions":
        base = random_delaunay(params["n_points"], seed)
        return with_inclusions(base, params["n_circles"], params["coverage"], seed + 1)
    if kind == "cube_tets":
        return cube_tets(params["n"])
    if kind == "cube_portion":
        return cube_portion(seed, params["n"])
    raise ValueError(f"unknown generator {kind!r}")


@dataclass(frozen=True)
class IndexRecord:
    kind: str
    seed: int
    n_cells: int
    mesh_path: str
    graph_path: str


INDEX_NAME = "index.tsv"


def build_dataset(spec: DatasetSpec, out_dir) -> list[IndexRecord]:
    """Generate meshes, cache their graphs and write ``index.tsv``."""
    from . import formats
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    records = []
    for kind in GENERATOR_KINDS:
        for k in range(spec.counts.get(kind, 0)):
            seed = spec.sample_seed(kind, k)
            mesh = generate_one(kind, spec.params(kind), seed)
            stem = f"{kind}_{k:04d}"
            mesh_rel, graph_rel = f"meshes/{stem}.vtk", f"graphs/{stem}.graph"
            formats.write_mesh(mesh, out / mesh_rel)
            geometry = compute_geometry(mesh)
            formats.write_graph_cache(out / graph_rel, build_adjacency(mesh), geometry.centroids,
                                      geometry.measures, mesh.physical_tags)
            records.append(IndexRecord(kind, seed, mesh.n_cells, mesh_rel, graph_rel))
            log.info("generated %s (%d cells)", stem, mesh.n_cells)
    formats.write_index(records, out / INDEX_NAME)
    return records
