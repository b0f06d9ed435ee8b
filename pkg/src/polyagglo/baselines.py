"""Non-learned partitioners: k-means on centroids and a multilevel bisector.

The multilevel bisector (heavy-edge coarsening, greedy region growing on the
coarsest graph, Fiduccia-Mattheyses refinement while uncoarsening) stands in
for METIS. Balance is measured on node weights, i.e. cell measures.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass

import numpy as np

from .graph import Graph, coarsen_hem, connected_components, project_partition

BALANCE_TOLERANCE = 0.1
COARSEST_SIZE = 64
INITIAL_TRIALS = 8


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    max_iters: int = 100
    seed: int = 0
    init: str = "k-means++"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.init != "k-means++":
            raise ValueError(f"unsupported init {self.init!r}")


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = ((points ** 2).sum(1)[:, None] - 2.0 * points @ centers.T + (centers ** 2).sum(1)[None, :])
    return np.maximum(d, 0.0)


def _assign(points: np.ndarray, centers: np.ndarray, chunk: int = 16384):
    labels = np.empty(len(points), dtype=np.int64)
    dist = np.empty(len(points))
    for s in range(0, len(points), chunk):
        d = _sq_dists(points[s:s + chunk], centers)
        labels[s:s + chunk] = d.argmin(axis=1)
        dist[s:s + chunk] = d[np.arange(len(d)), labels[s:s + chunk]]
    return labels, dist


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    closest = ((points - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(points[idx])
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(1))
    return np.array(centers)


def kmeans_cluster(points, config: KMeansConfig, history: list | None = None) -> np.ndarray:
    """Lloyd iterations from k-means++ seeding.

    If ``history`` is given, the within-cluster sum of squares after every
    iteration is appended to it.
    """
    pts = np.asarray(points, dtype=float)
    n, k = len(pts), config.k
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    rng = np.random.default_rng(config.seed)
    centers = kmeans_plusplus(pts, k, rng)
    labels, dist = _assign(pts, centers)
    for _ in range(config.max_iters):
        counts = np.bincount(labels, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # farthest point among clusters that can spare one
            movable = counts[labels] > 1
            far = int(np.argmax(np.where(movable, dist, -1.0)))
            counts[labels[far]] -= 1
            counts[c] += 1
            labels[far] = c
            dist[far] = 0.0
        for dcol in range(pts.shape[1]):
            centers[:, dcol] = np.bincount(labels, weights=pts[:, dcol], minlength=k) / counts
        if history is not None:
            history.append(float(((pts - centers[labels]) ** 2).sum()))
        new_labels, dist = _assign(pts, centers)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels


# --------------------------------------------------------------------------
# Fiduccia-Mattheyses

def _imbalance(w0: float, total: float, fraction: float) -> float:
    """Deviation from the target split (side 1 share ``fraction``); equals
    ``|w0 - w1|`` for an even split."""
    return 2.0 * abs(w0 - (1.0 - fraction) * total)


def fm_refine(graph: Graph, labels, max_passes: int = 8, tolerance: float = BALANCE_TOLERANCE,
              fraction: float = 0.5, max_stall: int = 100) -> np.ndarray:
    """Boundary FM passes on a binary labelling.

    Only states whose imbalance is within ``tolerance * W + max node weight``
    (or no worse than the input) can be kept. Moves may overshoot that bound
    by one more node weight so that single-node moves out of an exactly
    balanced state are possible. Each pass rolls back to its lowest-cut
    admissible prefix (ties: smaller imbalance), so the cut never grows.
    """
    lab = np.asarray(labels, dtype=np.int64).copy()
    n = graph.n
    if n < 2:
        return lab
    ip, ix, wd = graph.neighbor_lists()
    nw = graph.node_weight.tolist()
    total = float(graph.node_weight.sum())
    max_w = float(graph.node_weight.max())
    bound = tolerance * total + max_w
    lab_l = lab.tolist()

    for _ in range(max_passes):
        gain = [0.0] * n
        for v in range(n):
            g = 0.0
            lv = lab_l[v]
            for k in range(ip[v], ip[v + 1]):
                g += wd[k] if lab_l[ix[k]] != lv else -wd[k]
            gain[v] = g
        version = [0] * n
        heaps: list[list] = [[], []]
        for v in range(n):
            for k in range(ip[v], ip[v + 1]):
                if lab_l[ix[k]] != lab_l[v]:
                    heaps[lab_l[v]].append((-gain[v], v, 0))
                    break
        heapq.heapify(heaps[0])
        heapq.heapify(heaps[1])
        locked = [False] * n
        w0 = sum(nw[v] for v in range(n) if lab_l[v] == 0)
        cur_imb = _imbalance(w0, total, fraction)
        keep_bound = max(bound, cur_imb)
        delta = 0.0
        best = (0.0, cur_imb)
        best_len = 0
        moves: list[int] = []
        stall = 0
        while True:
            choice = None
            for side in (0, 1):
                h = heaps[side]
                while h and (locked[h[0][1]] or lab_l[h[0][1]] != side or h[0][2] != version[h[0][1]]):
                    heapq.heappop(h)
                if not h:
                    continue
                g, v = -h[0][0], h[0][1]
                nw0 = w0 - nw[v] if side == 0 else w0 + nw[v]
                imb = _imbalance(nw0, total, fraction)
                if imb > bound + max_w and imb >= cur_imb:
                    continue
                if nw0 <= 0 or nw0 >= total:
                    continue
                if choice is None or (g, -v) > (choice[0], -choice[1]):
                    choice = (g, v, nw0, imb)
            if choice is None:
                break
            g, v, w0, cur_imb = choice
            heapq.heappop(heaps[lab_l[v]])
            old = lab_l[v]
            lab_l[v] = 1 - old
            locked[v] = True
            delta -= g
            moves.append(v)
            gain[v] = -g
            for k in range(ip[v], ip[v + 1]):
                u = ix[k]
                if locked[u]:
                    continue
                gain[u] += -2.0 * wd[k] if lab_l[u] == lab_l[v] else 2.0 * wd[k]
                version[u] += 1
                heapq.heappush(heaps[lab_l[u]], (-gain[u], u, version[u]))
            if cur_imb <= keep_bound and (delta < best[0] - 1e-12 or (
                    abs(delta - best[0]) <= 1e-12 and cur_imb < best[1])):
                best = (delta, cur_imb)
                best_len = len(moves)
                stall = 0
            else:
                stall += 1
                if stall > max_stall:
                    break
        for v in moves[best_len:]:
            lab_l[v] = 1 - lab_l[v]
        if best_len == 0:
            break
    return np.array(lab_l, dtype=np.int64)


def rebalance(graph: Graph, labels, tolerance: float = BALANCE_TOLERANCE,
              fraction: float = 0.5) -> np.ndarray:
    """Move nodes off the overweight side, best cut gain first (boundary nodes
    preferred), until the imbalance is within ``tolerance * W + max node weight``."""
    lab = np.asarray(labels, dtype=np.int64).copy()
    total = float(graph.node_weight.sum())
    bound = tolerance * total + float(graph.node_weight.max())
    w0 = float(graph.node_weight[lab == 0].sum())
    if _imbalance(w0, total, fraction) <= bound:
        return lab
    ip, ix, wd = graph.neighbor_lists()
    nw = graph.node_weight.tolist()
    while _imbalance(w0, total, fraction) > bound:
        heavy = 0 if w0 > (1.0 - fraction) * total else 1
        cand = np.flatnonzero(lab == heavy)
        if len(cand) <= 1:
            break
        best = None
        for v in cand.tolist():
            g = sum(wd[k] if lab[ix[k]] != heavy else -wd[k] for k in range(ip[v], ip[v + 1]))
            key = (g, -nw[v], -v)
            if best is None or key > best[0]:
                best = (key, v)
        v = best[1]
        lab[v] = 1 - heavy
        w0 += nw[v] if heavy == 1 else -nw[v]
    return lab


# --------------------------------------------------------------------------
# multilevel bisection

def greedy_growth(graph: Graph, fraction: float = 0.5, start: int | None = None) -> np.ndarray:
    """BFS region growing until side 1 holds ``fraction`` of the node weight
    (closest stopping point wins). Starts by default from the lowest-id
    minimum-degree node."""
    n = graph.n
    ip, ix, _ = graph.neighbor_lists()
    if start is None:
        counts = np.diff(graph.adjacency.indptr)
        start = int(np.lexsort((np.arange(n), counts))[0])
    target = fraction * float(graph.node_weight.sum())
    nw = graph.node_weight.tolist()
    lab = [0] * n
    seen = [False] * n
    seen[start] = True
    queue = deque([start])
    grown = 0.0
    taken = 0
    while queue:
        u = queue.popleft()
        if grown + nw[u] >= target:
            if taken == 0 or (grown + nw[u] - target) <= (target - grown):
                lab[u] = 1
                taken += 1
            break
        lab[u] = 1
        grown += nw[u]
        taken += 1
        for k in range(ip[u], ip[u + 1]):
            v = ix[k]
            if not seen[v]:
                seen[v] = True
                queue.append(v)
    if taken == n:
        lab[start] = 0 if n > 1 else 1
    return np.array(lab, dtype=np.int64)


def _initial_bisection(graph: Graph, fraction: float, fm_passes: int) -> np.ndarray:
    """Best (cut, imbalance) of FM-refined growths from several start nodes:
    the minimum-degree node plus nodes spread evenly over the id range."""
    n = graph.n
    counts = np.diff(graph.adjacency.indptr)
    first = int(np.lexsort((np.arange(n), counts))[0])
    starts = [first] + [s for s in np.linspace(0, n - 1, INITIAL_TRIALS - 1).round().astype(int).tolist()
                        if s != first]
    total = float(graph.node_weight.sum())
    best = None
    for s in dict.fromkeys(starts):
        lab = fm_refine(graph, greedy_growth(graph, fraction, s), max_passes=fm_passes, fraction=fraction)
        if lab.min() == lab.max():
            continue
        i, j, w = graph.edges()
        key = (float(w[lab[i] != lab[j]].sum()),
               _imbalance(float(graph.node_weight[lab == 0].sum()), total, fraction))
        if best is None or key < best[0]:
            best = (key, lab)
    return best[1] if best is not None else greedy_growth(graph, fraction)


def _multilevel_connected(graph: Graph, fraction: float, coarsest: int, fm_passes: int) -> np.ndarray:
    levels = []
    g = graph
    while g.n > coarsest:
        coarse, cmap = coarsen_hem(g, level=len(levels) + 1)
        if coarse.n >= g.n:
            break
        levels.append((g, cmap))
        g = coarse
    lab = _initial_bisection(g, fraction, fm_passes)
    for fine, cmap in reversed(levels):
        lab = rebalance(fine, project_partition(lab, cmap), fraction=fraction)
        lab = fm_refine(fine, lab, max_passes=fm_passes, fraction=fraction)
    return lab


def classic_bisect(graph: Graph, fraction: float = 0.5, coarsest: int = COARSEST_SIZE,
                   fm_passes: int = 8) -> np.ndarray:
    """Weight-balanced multilevel bisection; labels in {0, 1}, both non-empty.

    Side 1 receives ``fraction`` of the node weight. A disconnected graph has
    its largest component bisected and the remaining components assigned to
    the lighter side.
    """
    n = graph.n
    if n < 2:
        raise ValueError("bisection needs at least 2 nodes")
    comps = connected_components(graph)
    if len(comps) == 1:
        return _ensure_proper(_multilevel_connected(graph, fraction, coarsest, fm_passes))

    weights = [float(graph.node_weight[c].sum()) for c in comps]
    order = sorted(range(len(comps)), key=lambda k: (-weights[k], comps[k][0]))
    lab = np.zeros(n, dtype=np.int64)
    big = comps[order[0]]
    if len(big) >= 2:
        sub = graph.subgraph(big)
        lab[big] = classic_bisect(sub, fraction, coarsest, fm_passes)
        side_w = [float(graph.node_weight[big][lab[big] == s].sum()) for s in (0, 1)]
        rest = order[1:]
    else:
        side_w = [0.0, 0.0]
        rest = order
    targets = (1.0 - fraction, fraction)
    for k in rest:
        side = 0 if side_w[0] / targets[0] <= side_w[1] / targets[1] else 1
        lab[comps[k]] = side
        side_w[side] += weights[k]
    return _ensure_proper(lab)


def _ensure_proper(lab: np.ndarray) -> np.ndarray:
    if lab.min() == lab.max():
        lab = lab.copy()
        lab[-1] = 1 - lab[-1]
    return lab
