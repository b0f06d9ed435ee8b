"""Element-wise quality metrics of agglomerated meshes, all valued in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .mesh import AgglomeratedMesh, Element

SUMMARY_STATS = ("min", "q1", "median", "q3", "max", "mean")


# ----------------------------------------------------------------------
# enclosing ball

def _ball_through(pts: list[np.ndarray]):
    """Smallest ball having all ``pts`` on its boundary (centre in their affine hull)."""
    if not pts:
        return None, -1.0
    p0 = pts[0]
    if len(pts) == 1:
        return p0.copy(), 0.0
    m = np.array([p - p0 for p in pts[1:]])
    rhs = 0.5 * (m * m).sum(axis=1)
    lam = np.linalg.lstsq(m @ m.T, rhs, rcond=None)[0]
    center = p0 + lam @ m
    return center, float(np.linalg.norm(center - p0))


def _welzl(points: np.ndarray, boundary: list, dim: int):
    center, r = _ball_through(boundary)
    if len(boundary) == dim + 1:
        return center, r
    for i in range(len(points)):
        p = points[i]
        if r < 0 or np.linalg.norm(p - center) > r * (1 + 1e-12) + 1e-15:
            center, r = _welzl(points[:i], boundary + [p], dim)
    return center, r


def enclosing_ball(points, seed: int = 0):
    """Minimum enclosing ball (Welzl, move-through form) of a point set."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    dim = pts.shape[1]
    if len(pts) > dim + 1:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    pts = pts[np.random.default_rng(seed).permutation(len(pts))]
    return _welzl(pts, [], dim)


# ----------------------------------------------------------------------
# inscribed ball

def _segment_distances(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance matrix (points x segments)."""
    ab = b - a
    len2 = np.maximum((ab * ab).sum(1), 1e-300)
    t = np.clip(((p[:, None, :] - a[None]) * ab[None]).sum(2) / len2, 0, 1)
    closest = a[None] + t[..., None] * ab[None]
    return np.sqrt(((p[:, None, :] - closest) ** 2).sum(2))


def _inside_polygon(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Even-odd rule over all boundary edges (holes included)."""
    x, y = p[:, 0:1], p[:, 1:2]
    ax, ay, bx, by = a[:, 0], a[:, 1], b[:, 0], b[:, 1]
    straddle = (ay > y) != (by > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = ax + (y - ay) * (bx - ax) / (by - ay)
    return ((straddle & (x < xint)).sum(axis=1) % 2) == 1


def _triangle_distance(p: np.ndarray, a, b, c) -> np.ndarray:
    """Point-to-triangle distance, minimised over triangles: plane distance when
    the projection falls inside, otherwise the nearest edge."""
    n = np.cross(b - a, c - a)
    nn = np.maximum((n * n).sum(1), 1e-300)
    ap = p[:, None, :] - a[None]
    h = (ap * n[None]).sum(2) / nn
    q = p[:, None, :] - h[..., None] * n[None]
    inside = np.ones(h.shape, dtype=bool)
    for u, v in ((a, b), (b, c), (c, a)):
        inside &= (np.cross(v - u, q - u[None]) * n[None]).sum(2) >= 0
    d_plane = np.abs(h) * np.sqrt(nn)
    d_edge = np.minimum(np.minimum(_segment_distances(p, a, b), _segment_distances(p, b, c)),
                        _segment_distances(p, c, a))
    return np.where(inside, d_plane, d_edge).min(axis=1)


def _inside_solid(p: np.ndarray, a, b, c) -> np.ndarray:
    """Generalised winding number from oriented triangle solid angles."""
    ra, rb, rc = a[None] - p[:, None], b[None] - p[:, None], c[None] - p[:, None]
    la, lb, lc = (np.linalg.norm(r, axis=2) for r in (ra, rb, rc))
    num = (ra * np.cross(rb, rc)).sum(2)
    den = (la * lb * lc + (ra * rb).sum(2) * lc + (rb * rc).sum(2) * la + (rc * ra).sum(2) * lb)
    wind = 2.0 * np.arctan2(num, den).sum(axis=1) / (4 * np.pi)
    return np.abs(wind) > 0.5


class _Boundary:
    def __init__(self, verts: np.ndarray, faces, dim: int):
        self.dim = dim
        if dim == 2:
            e = np.array(faces, dtype=np.int64).reshape(-1, 2)
            self.a, self.b = verts[e[:, 0]], verts[e[:, 1]]
        else:
            tris = [(f[0], f[k], f[k + 1]) for f in faces for k in range(1, len(f) - 1)]
            t = np.array(tris, dtype=np.int64)
            self.a, self.b, self.c = verts[t[:, 0]], verts[t[:, 1]], verts[t[:, 2]]

    def signed_distance(self, p: np.ndarray, chunk: int = 2048) -> np.ndarray:
        out = np.empty(len(p))
        for s in range(0, len(p), chunk):
            q = p[s:s + chunk]
            if self.dim == 2:
                d = _segment_distances(q, self.a, self.b).min(axis=1)
                inside = _inside_polygon(q, self.a, self.b)
            else:
                d = _triangle_distance(q, self.a, self.b, self.c)
                inside = _inside_solid(q, self.a, self.b, self.c)
            out[s:s + chunk] = np.where(inside, d, -d)
        return out


def inscribed_radius(verts: np.ndarray, faces, dim: int, precision: float) -> float:
    """Largest distance from an interior point to the boundary, by grid refinement.

    Cells whose bound ``d(centre) + half_diagonal`` cannot beat the best value
    by more than ``precision`` are discarded; the rest are split in 2^dim.
    """
    bnd = _Boundary(verts, faces, dim)
    pts = np.vstack([bnd.a, bnd.b] + ([bnd.c] if dim == 3 else []))
    lo, hi = pts.min(0), pts.max(0)
    half = (hi - lo).max() / 2.0
    if half <= 0:
        return 0.0
    centers = ((lo + hi) / 2.0)[None]
    offsets = np.array(np.meshgrid(*[[-1, 1]] * dim, indexing="ij")).reshape(dim, -1).T
    best = 0.0
    for _ in range(64):
        d = bnd.signed_distance(centers)
        best = max(best, float(d.max()))
        keep = d + half * np.sqrt(dim) > best + precision
        if not keep.any():
            break
        half /= 2.0
        centers = (centers[keep][:, None, :] + offsets[None] * half).reshape(-1, dim)
    return best


def circle_ratio(verts: np.ndarray, element: Element, dim: int, rel_precision: float = 1e-3) -> float:
    vids = element.vertex_ids()
    _, r_out = enclosing_ball(verts[vids])
    if r_out <= 0 or element.measure <= 0:
        return 0.0
    r_in = inscribed_radius(verts, element.boundary_faces, dim, rel_precision * r_out)
    return float(np.clip(r_in / r_out, 0.0, 1.0))


# ----------------------------------------------------------------------
# shape and size ratios

def area_perimeter_ratio(area: float, perimeter: float) -> float:
    if perimeter <= 0:
        raise ValueError("zero boundary length")
    return 4.0 * np.pi * area / perimeter ** 2


def sphericity(volume: float, surface: float) -> float:
    if surface <= 0:
        raise ValueError("zero boundary area")
    return (36.0 * np.pi * volume ** 2) ** (1.0 / 3.0) / surface


def uniformity_factor(diameters) -> np.ndarray:
    d = np.asarray(diameters, dtype=float)
    return d / d.max()


def volumes_difference(measures) -> np.ndarray:
    """``1 / (1 + |V - mean| / mean)`` per element."""
    v = np.asarray(measures, dtype=float)
    vhat = v.mean()
    return 1.0 / (1.0 + np.abs(v - vhat) / vhat)


def heterogeneity_preservation(tags) -> float:
    p = (np.asarray(tags, dtype=float) >= 0.5).mean()
    return float(max(p, 1.0 - p))


# ----------------------------------------------------------------------
# reports

@dataclass
class QualityReport:
    columns: dict[str, np.ndarray]

    @property
    def n_elements(self) -> int:
        return len(next(iter(self.columns.values())))

    def summary(self) -> dict[str, dict[str, float]]:
        return {name: summarize(vals) for name, vals in self.columns.items()}

    def summary_text(self) -> str:
        lines = []
        for name, stats in self.summary().items():
            body = ", ".join(f"{k}: {v:.6g}" for k, v in stats.items())
            lines.append(f"{name}: {{{body}}}")
        return "\n".join(lines)


def summarize(values) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return dict(zip(SUMMARY_STATS, [*map(float, q), float(v.mean())]))


def quality_report(agg: AgglomeratedMesh, rel_precision: float = 1e-3) -> QualityReport:
    verts = agg.vertices
    dim = agg.dim
    els = agg.elements
    cols = {"CR": np.array([circle_ratio(verts, e, dim, rel_precision) for e in els])}
    if dim == 2:
        cols["APR"] = np.array([area_perimeter_ratio(e.measure, e.boundary_measure) for e in els])
    else:
        cols["SPH"] = np.array([sphericity(e.measure, e.boundary_measure) for e in els])
    cols["UF"] = uniformity_factor([e.diameter for e in els])
    cols["VD"] = volumes_difference([e.measure for e in els])
    if agg.fine.physical_tags is not None:
        cols["HP"] = np.array([heterogeneity_preservation(e.tags) for e in els])
    return QualityReport(cols)
