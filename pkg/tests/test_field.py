import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import UNIT_TET, cube_points
from tetsdf import field as F
from tetsdf.geometry import delaunay_tetrahedralize


def unit_complex():
    cx = delaunay_tetrahedralize(UNIT_TET)
    # values attached to input vertices; the complex keeps input vertex ids
    np.testing.assert_array_equal(cx.vertices, UNIT_TET)
    return cx


def test_sdf_eval_examples():
    cx = unit_complex()
    f = np.array([0.4, 0.2, 0.3, 0.1])
    assert F.sdf_eval(cx, f, [0.25, 0.25, 0.25]) == pytest.approx(0.25, abs=1e-15)
    for i in range(4):
        assert F.sdf_eval(cx, f, UNIT_TET[i]) == pytest.approx(f[i], abs=1e-15)
    with pytest.raises(F.OutsideHull):
        F.sdf_eval(cx, f, [2.0, 2.0, 2.0])
    assert np.isnan(F.sdf_eval_many(cx, f, [[2.0, 2.0, 2.0]])[0])


def test_sdf_continuous_across_faces():
    cx = delaunay_tetrahedralize(cube_points(0, 80))
    rng = np.random.default_rng(1)
    f = rng.normal(size=cx.n_vertices)
    t, i = np.nonzero(cx.neighbors >= 0)
    pick = rng.integers(len(t), size=1000)
    for a, face in zip(t[pick], i[pick]):
        b = cx.neighbors[a, face]
        w = rng.dirichlet(np.ones(3))
        p = w @ cx.vertices[np.delete(cx.tets[a], face)]
        assert abs(F.sdf_eval_in(cx, f, a, p) - F.sdf_eval_in(cx, f, b, p)) < 1e-12


def test_tet_gradient_examples():
    cx = unit_complex()
    g, n, deg = F.tet_gradient(cx, [0.0, 1.0, 0.0, 0.0], 0)
    np.testing.assert_allclose(g, [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(n, [1, 0, 0], atol=1e-15)
    assert not deg
    g, n, deg = F.tet_gradient(cx, [0.3] * 4, 0)
    np.testing.assert_allclose(g, 0, atol=1e-15)
    np.testing.assert_array_equal(n, 0)
    assert deg
    plane = 2 * UNIT_TET.sum(axis=1) - 1
    g, n, _ = F.tet_gradient(cx, plane, 0)
    np.testing.assert_allclose(g, [2, 2, 2], atol=1e-14)
    np.testing.assert_allclose(n, np.ones(3) / math.sqrt(3), atol=1e-15)


@given(st.integers(0, 10_000))
def test_tet_gradient_matches_finite_difference(seed):
    cx = delaunay_tetrahedralize(cube_points(seed, 30))
    rng = np.random.default_rng(seed)
    f = rng.normal(size=cx.n_vertices)
    grads = F.tet_gradients(cx, f)
    for t in rng.integers(cx.n_tets, size=5):
        c = cx.centroids[t]
        v = cx.vertices[cx.tets[t]]
        h = 1e-4 * np.mean(np.linalg.norm(v[:, None] - v[None], axis=2)[np.triu_indices(4, 1)])
        fd = np.array([(F.sdf_eval_in(cx, f, t, c + h * e) - F.sdf_eval_in(cx, f, t, c - h * e))
                       / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(fd, grads[t], rtol=1e-6, atol=1e-6 * np.abs(grads[t]).max())
        np.testing.assert_allclose(F.tet_gradient(cx, f, t)[0], grads[t], rtol=1e-12, atol=1e-14)


def test_color_eval_examples():
    cx = unit_complex()
    app = F.Appearance.constant(1, (0.5, 0.5, 0.5))
    d = np.array([0.0, 0.0, 1.0])
    np.testing.assert_allclose(F.color_eval(app, cx.centroids, 0, [0.9, 0.1, 0.0], d), 0.5,
                               atol=1e-15)
    app = F.Appearance.constant(1, (0.2, 0.4, 0.6))
    app.grad[0, 0] = (1.0, 0.0, 0.0)
    p = cx.centroids[0] + [0.1, 0.0, 0.0]
    np.testing.assert_allclose(F.color_eval(app, cx.centroids, 0, p, d), [0.3, 0.4, 0.6],
                               atol=1e-14)
    # at the representative point only the base colour remains
    np.testing.assert_allclose(F.color_eval(app, cx.centroids, 0, cx.centroids[0], d),
                               F.base_color(app, 0, d), atol=1e-15)


@given(st.integers(0, 10_000), st.sampled_from([0, 1, 2]))
def test_color_is_non_negative(seed, degree):
    rng = np.random.default_rng(seed)
    nb = (degree + 1) ** 2
    app = F.Appearance(rng.normal(0, 2, (1, 3, nb)), rng.normal(0, 5, (1, 3, 3)), degree)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    c = F.color_eval(app, np.zeros((1, 3)), 0, rng.normal(size=3), d)
    assert np.all(c >= 0)


def test_sh_basis_orthonormal():
    # Monte-Carlo orthonormality over the sphere (independent of the coefficients)
    rng = np.random.default_rng(0)
    d = rng.normal(size=(400_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    y = F.sh_basis(d, 2)
    gram = 4 * np.pi * (y.T @ y) / len(d)
    np.testing.assert_allclose(gram, np.eye(9), atol=0.02)


def test_softplus_roundtrip():
    y = np.linspace(1e-3, 5, 50)
    np.testing.assert_allclose(F.softplus(F.softplus_inv(y)), y, rtol=1e-12)


def test_sharpness_for_band():
    assert F.sharpness_for_band(1.0) == pytest.approx(2 * math.log(199))


def test_scene_generation_check():
    cx = unit_complex()
    scene = F.Scene(cx, np.zeros(3), F.Appearance.constant(1), 0.0)
    with pytest.raises(F.GenerationMismatch):
        scene.check()
