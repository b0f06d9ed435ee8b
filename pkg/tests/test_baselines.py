import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyagglo import generate
from polyagglo.baselines import (KMeansConfig, classic_bisect, fm_refine, greedy_growth,
                                 kmeans_cluster)
from polyagglo.graph import cut, graph_from_mesh, normalized_cut

from conftest import graph_from_edges, grid_graph, random_graph


def wcss(points, labels):
    return sum(((points[labels == c] - points[labels == c].mean(0)) ** 2).sum() for c in np.unique(labels))


def test_kmeans_separated_pairs():
    pts = np.array([[0, 0], [0.1, 0], [5, 5], [5.1, 5]])
    lab = kmeans_cluster(pts, KMeansConfig(2, seed=3))
    # exhaustive oracle over all proper 2-labelings
    best = min((wcss(pts, np.array([0, *b])), (0, *b)) for b in itertools.product([0, 1], repeat=3) if 1 in b)
    assert wcss(pts, lab) == pytest.approx(best[0])
    assert lab[0] == lab[1] and lab[2] == lab[3] and lab[0] != lab[2]


def test_kmeans_k_equals_n_and_one(rng):
    pts = rng.random((7, 2))
    lab = kmeans_cluster(pts, KMeansConfig(7))
    assert len(set(lab.tolist())) == 7 and wcss(pts, lab) == 0
    assert kmeans_cluster(pts, KMeansConfig(1)).tolist() == [0] * 7
    with pytest.raises(ValueError):
        kmeans_cluster(pts, KMeansConfig(8))
    with pytest.raises(ValueError):
        KMeansConfig(0)


def test_kmeans_duplicates_and_monotone(rng):
    pts = np.repeat(rng.random((3, 2)), 4, axis=0)
    lab = kmeans_cluster(pts, KMeansConfig(5, seed=1))
    assert len(lab) == 12 and set(lab.tolist()) <= set(range(5))
    pts = rng.random((300, 2))
    hist = []
    a = kmeans_cluster(pts, KMeansConfig(8, seed=2), hist)
    assert all(b <= a_ + 1e-9 for a_, b in zip(hist, hist[1:]))
    np.testing.assert_array_equal(a, kmeans_cluster(pts, KMeansConfig(8, seed=2)))


def test_classic_path_of_four():
    g = graph_from_edges(4, [(0, 1), (1, 2), (2, 3)])
    lab = classic_bisect(g)
    assert cut(g, lab == 1) == 1
    assert sorted(np.bincount(lab).tolist()) == [2, 2]


def test_classic_4x4_grid_straight_cut():
    g = grid_graph(4, 4)
    lab = classic_bisect(g)
    assert cut(g, lab == 1) == 4
    assert np.bincount(lab).tolist() == [8, 8]
    # exhaustive balanced search confirms 4 is optimal
    best = min(cut(g, list(s)) for s in itertools.combinations(range(16), 8) if 0 in s)
    assert best == 4


def test_classic_two_cliques():
    edges = list(itertools.combinations(range(5), 2)) + list(itertools.combinations(range(5, 10), 2))
    g = graph_from_edges(10, edges + [(4, 5)])
    lab = classic_bisect(g)
    assert cut(g, lab == 1) == 1
    assert len(set(lab[:5])) == 1 and len(set(lab[5:])) == 1


def test_classic_disconnected_input():
    g = graph_from_edges(7, [(0, 1), (1, 2), (2, 3), (4, 5)])
    lab = classic_bisect(g)
    assert set(lab.tolist()) == {0, 1}
    # small components all land on one side of a part of the big one
    assert lab[4] == lab[5]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_classic_balance_and_determinism(seed):
    mesh = generate.random_delaunay(int(np.random.default_rng(seed).integers(30, 150)), seed)
    g = graph_from_mesh(mesh)
    lab = classic_bisect(g)
    w = g.node_weight
    imbalance = abs(w[lab == 0].sum() - w[lab == 1].sum())
    assert imbalance <= 0.1 * w.sum() + w.max() + 1e-12
    assert lab.min() == 0 and lab.max() == 1
    np.testing.assert_array_equal(lab, classic_bisect(g))


def test_greedy_growth_fraction():
    g = grid_graph(1, 10)
    lab = greedy_growth(g, 0.3)
    assert lab.sum() == 3 and lab[0] == 1


def test_fm_keeps_optimal_cycle():
    g = graph_from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
    np.testing.assert_array_equal(fm_refine(g, np.array([0, 0, 1, 1])), [0, 0, 1, 1])


def test_fm_fixes_misassigned_path_node():
    g = graph_from_edges(6, [(k, k + 1) for k in range(5)])
    start = np.array([0, 0, 1, 0, 1, 1])
    out = fm_refine(g, start, max_passes=1)
    assert cut(g, out == 1) == 1
    np.testing.assert_array_equal(out, [0, 0, 0, 1, 1, 1])


def test_fm_never_increases_cut(rng):
    for _ in range(100):
        g = random_graph(rng, 16, 0.3)
        lab = rng.integers(0, 2, 16)
        out = fm_refine(g, lab)
        assert cut(g, out == 1) <= cut(g, lab == 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_classic_within_factor_of_balanced_optimum(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 11))
    g = random_graph(rng, n, float(rng.uniform(0.3, 0.7)))
    best = np.inf
    for b in itertools.product([0, 1], repeat=n - 1):
        lab = np.array([0, *b])
        if 1 in b and abs(n - 2 * lab.sum()) <= 0.1 * n + 1:
            best = min(best, normalized_cut(g, lab))
    assert normalized_cut(g, classic_bisect(g)) <= 1.3 * best + 1e-12
