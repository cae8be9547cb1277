import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import ConvexHull

from conftest import UNIT_TET, cube_points, random_points
from tetsdf import geometry as G


def brute_insphere(tet_pts, p):
    """Independent in-circumsphere test: solve for the centre by least squares."""
    a = 2.0 * (tet_pts[1:] - tet_pts[0])
    b = np.sum(tet_pts[1:] ** 2, axis=1) - np.sum(tet_pts[0] ** 2)
    c = np.linalg.solve(a, b)
    r = np.linalg.norm(tet_pts[0] - c)
    return np.linalg.norm(p - c) - r


def brute_delaunay(points, tol=1e-9):
    """All 4-subsets with an empty circumsphere (exponential; tiny inputs only)."""
    out = set()
    for quad in itertools.combinations(range(len(points)), 4):
        q = points[list(quad)]
        if abs(np.linalg.det(q[1:] - q[0])) < 1e-12:
            continue
        others = [i for i in range(len(points)) if i not in quad]
        if all(brute_insphere(q, points[i]) > -tol for i in others):
            out.add(frozenset(quad))
    return out


def tet_sets(cx):
    return {frozenset(t) for t in cx.tets.tolist()}


# --- construction


def test_unit_tet_single_cell(unit_tet):
    cx = G.delaunay_tetrahedralize(unit_tet)
    assert cx.n_tets == 1
    assert len(cx.hull_faces) == 4
    assert np.all(cx.neighbors == G.HULL)


def test_unit_tet_plus_centroid_matches_brute_force(unit_tet):
    pts = np.vstack([unit_tet, [0.25, 0.25, 0.25]])
    cx = G.delaunay_tetrahedralize(pts)
    assert cx.n_tets == 4
    assert all(4 in t for t in cx.tets.tolist())
    assert tet_sets(cx) == brute_delaunay(pts)


def test_small_random_matches_brute_force():
    pts = random_points(3, 9)
    assert tet_sets(G.delaunay_tetrahedralize(pts)) == brute_delaunay(pts)


def test_positive_orientation():
    cx = G.delaunay_tetrahedralize(random_points(5, 60))
    assert np.all(cx.volumes > 0)
    v = cx.vertices[cx.tets]
    assert np.all(G.orient3d(v[:, 0], v[:, 1], v[:, 2], v[:, 3]) > 0)


def test_fifty_random_points_insphere_sweep():
    pts = random_points(11, 50)
    cx = G.delaunay_tetrahedralize(pts)
    worst = -np.inf
    for t in cx.tets:
        a, b, c, d = pts[t]
        for i in np.setdiff1d(np.arange(len(pts)), t):
            worst = max(worst, G.insphere(a, b, c, d, pts[i]))
    assert worst <= 1e-12


@pytest.mark.parametrize("pts", [
    np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float),
    np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [2, 3, 0]], float),
    np.vstack([UNIT_TET, [[0, 0, 0]]]),
    np.vstack([UNIT_TET, [[1e-10, 0, 0]]]),
    np.vstack([UNIT_TET, [[np.nan, 0, 0]]]),
])
def test_degenerate_input_rejected(pts):
    with pytest.raises(G.DegenerateInput):
        G.delaunay_tetrahedralize(pts)


# --- barycentric / circumradius / locate


def test_barycentric_examples(unit_tet):
    cx = G.delaunay_tetrahedralize(unit_tet)
    # vertex order in the complex may differ from the input; compare per vertex
    order = [int(np.argmin(np.linalg.norm(unit_tet - v, axis=1))) for v in cx.vertices[cx.tets[0]]]

    def in_input_order(lam):
        out = np.zeros(4)
        out[order] = lam
        return out

    np.testing.assert_allclose(in_input_order(G.barycentric(cx, 0, [0.25] * 3)), [0.25] * 4,
                               atol=1e-12)
    np.testing.assert_allclose(in_input_order(G.barycentric(cx, 0, [0.2, 0.3, 0.1])),
                               [0.4, 0.2, 0.3, 0.1], atol=1e-12)
    np.testing.assert_allclose(in_input_order(G.barycentric(cx, 0, unit_tet[2])), [0, 0, 1, 0],
                               atol=1e-12)


@given(st.integers(0, 10_000))
def test_barycentric_reconstructs(seed):
    cx = G.delaunay_tetrahedralize(random_points(seed, 12))
    rng = np.random.default_rng(seed)
    t = int(rng.integers(cx.n_tets))
    w = rng.dirichlet(np.ones(4))
    p = w @ cx.vertices[cx.tets[t]]
    lam = G.barycentric(cx, t, p)
    assert abs(lam.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(lam @ cx.vertices[cx.tets[t]], p, atol=1e-10)
    assert np.all(lam >= -1e-10)


def test_circumradius_examples(unit_tet):
    cx = G.delaunay_tetrahedralize(unit_tet)
    assert G.circumradius(cx, 0) == pytest.approx(0.8660254, abs=1e-7)
    assert G.circumradius(G.delaunay_tetrahedralize(2 * unit_tet), 0) == pytest.approx(
        2 * G.circumradius(cx, 0), rel=1e-12)
    regular = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float) / math.sqrt(8)
    assert G.circumradius(G.delaunay_tetrahedralize(regular), 0) == pytest.approx(0.6123724,
                                                                                   abs=1e-7)


def test_circumcenter_equidistant():
    cx = G.delaunay_tetrahedralize(random_points(2, 80))
    c, r = G.circumcenters(cx)
    d = np.linalg.norm(cx.vertices[cx.tets] - c[:, None, :], axis=2)
    assert np.max(np.abs(d - r[:, None])) < 1e-9


def test_locate_centroids_and_outside():
    cx = G.delaunay_tetrahedralize(cube_points(4, 60))
    rng = np.random.default_rng(0)
    for t in range(cx.n_tets):
        assert G.locate(cx, cx.centroids[t], hint=int(rng.integers(cx.n_tets))) == t
    assert G.locate(cx, (10.0, 10.0, 10.0)) == G.OUTSIDE
    np.testing.assert_array_equal(G.locate_many(cx, cx.centroids), np.arange(cx.n_tets))


def test_locate_shared_face_prefers_lower_id():
    cx = G.delaunay_tetrahedralize(cube_points(6, 30))
    t, i = np.nonzero(cx.neighbors > np.arange(cx.n_tets)[:, None])
    for a, face in zip(t, i):
        b = cx.neighbors[a, face]
        p = cx.vertices[np.delete(cx.tets[a], face)].mean(axis=0)
        assert G.locate(cx, p, hint=int(b)) == min(a, b)


# --- invariants


@given(st.integers(0, 10_000), st.integers(4, 120))
def test_delaunay_invariants(seed, n):
    pts = random_points(seed, n)
    cx = G.delaunay_tetrahedralize(pts)
    assert G.check_delaunay(cx)
    G.check_adjacency(cx)
    assert cx.volumes.sum() == pytest.approx(ConvexHull(pts).volume, rel=1e-9)
    # every interior face shared by exactly two tets
    faces = np.sort(cx.tets[:, [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]].reshape(-1, 3), axis=1)
    _, counts = np.unique(faces, axis=0, return_counts=True)
    assert set(counts.tolist()) <= {1, 2}
    assert np.sum(counts == 1) == len(cx.hull_faces)


# --- edits


def test_insert_centroid(unit_tet):
    cx = G.delaunay_tetrahedralize(unit_tet)
    edit = G.insert_vertices(cx, [[0.25, 0.25, 0.25]], carry=lambda p: np.full(len(p), 7.0))
    assert edit.complex.n_tets == 4
    assert edit.complex.generation == cx.generation + 1
    np.testing.assert_array_equal(edit.vertex_map, np.arange(4))
    np.testing.assert_array_equal(edit.new_vertices, [4])
    np.testing.assert_array_equal(edit.carried, [7.0])
    assert G.check_delaunay(edit.complex)


def test_insert_empty_and_duplicate_are_noops(unit_tet):
    cx = G.delaunay_tetrahedralize(unit_tet)
    for pts in (np.zeros((0, 3)), unit_tet[1:2], unit_tet[1:2] + 1e-11):
        edit = G.insert_vertices(cx, pts)
        assert edit.complex is cx
        assert edit.complex.generation == cx.generation
        assert len(edit.new_vertices) == 0


def test_remove_round_trip(unit_tet):
    cx = G.delaunay_tetrahedralize(np.vstack([unit_tet, [0.25, 0.25, 0.25]]))
    edit = G.remove_vertices(cx, [4])
    assert edit.complex.n_tets == 1
    np.testing.assert_array_equal(edit.vertex_map, [0, 1, 2, 3, -1])
    assert G.remove_vertices(cx, []).complex is cx
    with pytest.raises(G.HullVertexRemoval):
        G.remove_vertices(cx, [0])


@given(st.integers(0, 10_000))
def test_insert_remove_preserves_invariants(seed):
    cx = G.delaunay_tetrahedralize(cube_points(seed, 40))
    rng = np.random.default_rng(seed)
    new = rng.uniform(-0.9, 0.9, (10, 3))
    ins = G.insert_vertices(cx, new)
    assert ins.complex.n_vertices == cx.n_vertices + 10
    assert G.check_delaunay(ins.complex)
    G.check_adjacency(ins.complex)
    removed = G.remove_vertices(ins.complex, ins.new_vertices)
    assert tet_sets(removed.complex) == tet_sets(cx)
    assert G.check_delaunay(removed.complex)


def test_match_tets_identity_for_untouched_cells():
    cx = G.delaunay_tetrahedralize(cube_points(1, 50))
    edit = G.insert_vertices(cx, [[0.0, 0.0, 0.0]])
    src = G.match_tets(cx, edit.complex, edit.vertex_map)
    ok = src >= 0
    assert ok.any() and not ok.all()
    np.testing.assert_array_equal(np.sort(cx.tets[src[ok]], axis=1),
                                  np.sort(edit.complex.tets[ok], axis=1))
