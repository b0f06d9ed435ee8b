import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from polyagglo.graph import Graph
from polyagglo.mesh import Mesh


def graph_from_edges(n, edges, weights=None, centroids=None, node_weight=None):
    i, j = np.array(edges, dtype=int).T if edges else (np.zeros(0, int), np.zeros(0, int))
    w = np.ones(len(i)) if weights is None else np.asarray(weights, dtype=float)
    a = sp.coo_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(n, n)).tocsr()
    return Graph(a, node_weight=node_weight, centroids=centroids)


def grid_graph(rows, cols):
    """rows x cols lattice with unit spacing; node id = r * cols + c."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                edges.append((k, k + 1))
            if r + 1 < rows:
                edges.append((k, k + cols))
    xy = np.array([(c, r) for r in range(rows) for c in range(cols)], dtype=float)
    return graph_from_edges(rows * cols, edges, centroids=xy)


def random_graph(rng, n, p=0.4, connected=True):
    while True:
        edges = [(a, b) for a, b in itertools.combinations(range(n), 2) if rng.random() < p]
        g = graph_from_edges(n, edges, centroids=rng.random((n, 2)))
        if not connected:
            return g
        from polyagglo.graph import connected_components
        if len(connected_components(g)) == 1:
            return g


def unit_square_mesh():
    return Mesh.from_polygons([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2, 3]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ----------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per numbered criterion

_CRITERIA: dict[int, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA.setdefault(mark.args[0], []).append("pass" if rep.passed else rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        status = "PASS" if all(r == "pass" for r in results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status} ({results.count('pass')}/{len(results)} checks)")
