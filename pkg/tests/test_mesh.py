import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyagglo import generate
from polyagglo.mesh import (HEXAHEDRON, PYRAMID, TETRAHEDRON, Cell, DegenerateCellError,
                            DisconnectedElementError, Mesh, MeshError, NonManifoldFaceError,
                            build_adjacency, compute_geometry, merge_cells)

from conftest import unit_square_mesh


def brute_force_adjacency(mesh):
    """O(n^2) pairwise shared-face comparison."""
    n = mesh.n_cells
    a = np.zeros((n, n))
    faces = [set(c.faces) for c in mesh.cells]
    for i, j in itertools.combinations(range(n), 2):
        if faces[i] & faces[j]:
            a[i, j] = a[j, i] = 1
    return a


def test_unit_square_geometry():
    g = compute_geometry(unit_square_mesh())[0]
    assert g.measure == pytest.approx(1.0)
    np.testing.assert_allclose(g.centroid, [0.5, 0.5])
    assert g.diameter == pytest.approx(np.sqrt(2))


def test_reference_tetrahedron_volume():
    verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    mesh = Mesh(verts, [Cell.solid(TETRAHEDRON, [0, 1, 2, 3])])
    g = compute_geometry(mesh)[0]
    assert g.measure == pytest.approx(1 / 6)
    np.testing.assert_allclose(g.centroid, [0.25, 0.25, 0.25])


def test_unit_cube_hex_and_pyramid():
    cube = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
    hexa = Mesh(cube, [Cell.solid(HEXAHEDRON, range(8))])
    g = compute_geometry(hexa)[0]
    assert g.measure == pytest.approx(1.0)
    np.testing.assert_allclose(g.centroid, [0.5, 0.5, 0.5])
    assert g.diameter == pytest.approx(np.sqrt(3))
    pyr = Mesh(cube[:4] + [[0.5, 0.5, 1.0]], [Cell.solid(PYRAMID, range(5))])
    g = compute_geometry(pyr)[0]
    assert g.measure == pytest.approx(1 / 3)
    np.testing.assert_allclose(g.centroid, [0.5, 0.5, 0.25])


def test_polyhedron_cube_from_faces():
    cube = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], float)
    # deliberately inconsistent face windings
    faces = [(0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7)]
    mesh = Mesh(cube * 2.0, [Cell.polyhedron(faces)])
    g = compute_geometry(mesh)[0]
    assert g.measure == pytest.approx(8.0)
    np.testing.assert_allclose(g.centroid, [1, 1, 1])


def test_random_convex_polygon_area_monte_carlo():
    rng = np.random.default_rng(3)
    ang = np.sort(rng.uniform(0, 2 * np.pi, 7))
    pts = np.c_[np.cos(ang), np.sin(ang)]
    mesh = Mesh.from_polygons(pts, [list(range(7))])
    area = compute_geometry(mesh)[0].measure
    # Monte-Carlo oracle: convex polygon is the intersection of edge half-planes
    samples = rng.uniform(-1, 1, (400_000, 2))
    inside = np.ones(len(samples), bool)
    for k in range(7):
        a, b = pts[k], pts[(k + 1) % 7]
        inside &= (b[0] - a[0]) * (samples[:, 1] - a[1]) - (b[1] - a[1]) * (samples[:, 0] - a[0]) >= 0
    assert area == pytest.approx(4.0 * inside.mean(), rel=0.01)


def test_clockwise_polygon_rewound():
    mesh = Mesh.from_polygons([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 3, 2, 1]])
    assert compute_geometry(mesh)[0].measure == pytest.approx(1.0)


def test_degenerate_cell_rejected():
    mesh = Mesh.from_polygons([[0, 0], [1, 0], [2, 0], [0, 1], [1, 1]], [[0, 1, 4, 3], [0, 1, 2]])
    with pytest.raises(DegenerateCellError) as exc:
        compute_geometry(mesh)
    assert exc.value.cell_index == 1


def test_invalid_meshes():
    with pytest.raises(MeshError):
        Mesh.from_polygons([[0, 0], [1, 0], [1, 1]], [[0, 1, 5]])
    with pytest.raises(MeshError):
        Mesh.from_polygons([[0, 0], [1, 0], [1, 1]], [[0, 1]])
    with pytest.raises(MeshError):
        Mesh.from_polygons([[0, 0], [1, 0], [1, 1]], [[0, 1, 2]], physical_tags=[0.0, 1.0])


def test_two_triangles_adjacency():
    mesh = Mesh.from_polygons([[0, 0], [1, 0], [0, 1], [1, 1]], [[0, 1, 2], [1, 3, 2]])
    np.testing.assert_array_equal(build_adjacency(mesh).toarray(), [[0, 1], [1, 0]])


def test_grid_adjacency_degrees():
    a = build_adjacency(generate.structured_quads(3))
    deg = np.asarray(a.sum(axis=1)).ravel().reshape(3, 3)
    np.testing.assert_array_equal(deg, [[2, 3, 2], [3, 4, 3], [2, 3, 2]])
    np.testing.assert_array_equal(a.toarray(), brute_force_adjacency(generate.structured_quads(3)))


def test_single_cell_adjacency():
    a = build_adjacency(unit_square_mesh())
    assert a.shape == (1, 1) and a.nnz == 0


def test_non_manifold_face():
    verts = [[0, 0], [1, 0], [0.5, 1], [0.5, -1], [2, 0.5]]
    # edge (0,1) used by three triangles
    mesh = Mesh.from_polygons(verts, [[0, 1, 2], [0, 3, 1], [0, 1, 4]])
    with pytest.raises(NonManifoldFaceError) as exc:
        build_adjacency(mesh)
    assert exc.value.face == (0, 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["delaunay", "voronoi", "tets"]))
def test_adjacency_matches_brute_force(seed, kind):
    if kind == "delaunay":
        mesh = generate.random_delaunay(30, seed)
    elif kind == "voronoi":
        mesh = generate.random_voronoi(40, seed)
    else:
        mesh = generate.cube_portion(seed, n=2)
    a = build_adjacency(mesh)
    assert (a != a.T).nnz == 0
    assert not a.diagonal().any()
    np.testing.assert_array_equal(a.toarray(), brute_force_adjacency(mesh))


def test_merge_two_squares():
    mesh = Mesh.from_polygons([[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]], [[0, 1, 4, 3], [1, 2, 5, 4]])
    agg = merge_cells(mesh, [0, 0])
    assert agg.n_elements == 1
    el = agg.elements[0]
    assert el.measure == pytest.approx(2.0)
    assert el.boundary_measure == pytest.approx(6.0)
    assert len(el.boundary_faces) == 6
    assert len(agg.to_mesh().cells[0].vertex_ids) == 6


def test_merge_identity_labels():
    mesh = generate.random_delaunay(20, 1)
    agg = merge_cells(mesh, np.arange(mesh.n_cells))
    geo = compute_geometry(mesh)
    np.testing.assert_allclose([e.measure for e in agg.elements], geo.measures)
    np.testing.assert_allclose([e.diameter for e in agg.elements], geo.diameters)
    for el, cell in zip(agg.elements, mesh.cells):
        assert sorted(map(tuple, map(sorted, el.boundary_faces))) == sorted(cell.faces)


def test_merge_blocks_on_4x4_grid():
    mesh = generate.structured_quads(4)
    rows, cols = np.divmod(np.arange(16), 4)
    labels = (rows // 2) * 2 + cols // 2
    agg = merge_cells(mesh, labels)
    assert agg.n_elements == 4
    for el in agg.elements:
        assert el.measure == pytest.approx(4 / 16)
        assert len(el.boundary_faces) == 8  # 2 edges on each of 4 sides
        assert el.boundary_measure == pytest.approx(2.0)


def test_merge_rejects_disconnected_class():
    mesh = generate.structured_quads(3)
    labels = np.zeros(9, int)
    labels[[1, 3, 4, 5, 7]] = 1  # cross; corners form 4 pieces of class 0
    with pytest.raises(DisconnectedElementError):
        merge_cells(mesh, labels)


def test_merge_ring_has_hole_loop():
    from polyagglo.mesh import boundary_loops
    mesh = generate.structured_quads(3)
    labels = np.zeros(9, int)
    labels[4] = 1
    agg = merge_cells(mesh, labels)
    loops = boundary_loops(agg.vertices, agg.elements[0].boundary_faces)
    assert [h for _, h in loops] == [False, True]
    assert agg.elements[0].measure == pytest.approx(8 / 9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_merge_conserves_measure_and_diameter(seed, k):
    from polyagglo.engine import split_disconnected
    from polyagglo.graph import graph_from_mesh
    mesh = generate.random_delaunay(40, seed) if seed % 2 else generate.cube_portion(seed, n=3)
    rng = np.random.default_rng(seed)
    g = graph_from_mesh(mesh)
    labels = split_disconnected(g, rng.integers(0, k, mesh.n_cells))
    agg = merge_cells(mesh, labels)
    geo = compute_geometry(mesh)
    total = sum(e.measure for e in agg.elements)
    assert total == pytest.approx(geo.measures.sum(), rel=1e-12)
    for e in agg.elements:
        assert e.diameter >= geo.diameters[e.members].max() - 1e-12


def test_subset_and_equality():
    mesh = generate.structured_quads(3)
    sub = mesh.subset([0, 1])
    assert sub.n_cells == 2 and sub.n_vertices == 6
    assert mesh == generate.structured_quads(3)
    assert mesh != sub
