import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from conftest import UNIT_TET, cube_points
from tetsdf import adapt as A
from tetsdf.field import Appearance, Scene, color_eval, sdf_eval_many
from tetsdf.geometry import check_delaunay, circumradii, delaunay_tetrahedralize
from tetsdf.render import render_view, segment_alpha
from tetsdf.scenes import look_at


def make_scene(seed=0, n_inner=80, r=0.5, log_s=math.log(30.0)):
    cx = delaunay_tetrahedralize(cube_points(seed, n_inner))
    sdf = np.linalg.norm(cx.vertices, axis=1) - r
    return Scene(cx, sdf, Appearance.constant(cx.n_tets), log_s)


def o_max(fs, s):
    return 1.0 - oracles.phi(min(fs), s) / oracles.phi(max(fs), s)


# --- band and culling


def test_band_width_examples():
    assert A.band_width(64.0) == pytest.approx(0.1654158, abs=1e-7)
    assert abs(A.band_width(64.0) - 2 * math.log(199) / 64) < 1e-15
    assert A.band_width(2 * math.log(199)) == pytest.approx(1.0, abs=1e-15)
    # 99% of the logistic mass lies within +-band/2
    s = 37.0
    half = A.band_width(s) / 2
    assert oracles.phi(half, s) - oracles.phi(-half, s) == pytest.approx(0.99, abs=1e-12)


@given(st.floats(1e-3, 1e4))
def test_band_width_inverse_proportional(s):
    assert A.band_width(2 * s) == pytest.approx(A.band_width(s) / 2, rel=1e-14)


def single_tet(values):
    cx = delaunay_tetrahedralize(UNIT_TET)
    return cx, np.asarray(values, float)


def test_cull_examples():
    cx, f = single_tet([0.2, 0.25, 0.3, 0.35])
    assert A.cull_flags(cx, f, 64.0).mask[0]
    assert o_max(f, 64.0) == pytest.approx(2.8e-6, rel=0.05)
    assert A.opacity_upper_bound(0.2, 0.35, 64.0) == pytest.approx(o_max(f, 64.0), rel=1e-9)
    cx, f = single_tet([0.2, 0.3, 0.4, 0.5])
    assert o_max(f, 10.0) == pytest.approx(0.113268, abs=1e-6)
    assert not A.cull_flags(cx, f, 10.0).mask[0]


@given(st.lists(st.floats(0.0, 2.0), min_size=4, max_size=4), st.integers(0, 3),
       st.floats(1.0, 500.0))
def test_crossing_tets_never_culled(mags, neg, s):
    f = np.asarray(mags)
    f[neg] = -f[neg]
    if not (f.min() < 0 < f.max()):
        return
    cx, f = single_tet(f)
    assert not A.cull_flags(cx, f, s).mask[0]
    if s * min(abs(f.min()), f.max()) >= 2:
        assert o_max(f, s) > 0.5


def test_conservative_bound_randomized():
    rng = np.random.default_rng(0)
    n = 100_000
    f = rng.normal(0, 0.5, (n, 4))
    s = np.exp(rng.uniform(0, 6, n))
    # endpoints of a sub-segment: two random points of the tet
    w0, w1 = rng.dirichlet(np.ones(4), n), rng.dirichlet(np.ones(4), n)
    f0, f1 = np.sum(w0 * f, axis=1), np.sum(w1 * f, axis=1)
    alpha = segment_alpha(f0, f1, s)
    bound = A.opacity_upper_bound(f.min(axis=1), f.max(axis=1), s)
    assert np.all(alpha <= bound + 1e-12)


def test_culling_preserves_image():
    scene = make_scene(1, 400, log_s=math.log(200.0))
    cam = look_at((2.2, 1.1, 0.6), (0, 0, 0), 30, 30, 16, 16, 32, 32)
    flags = A.cull_flags(scene.complex, scene.sdf, scene.s)
    assert flags.mask.sum() > 0.3 * scene.complex.n_tets
    a = render_view(scene, cam).color
    b = render_view(scene, cam, cull=flags).color
    assert np.mean(np.abs(a - b)) < 0.01


# --- contribution statistics


def test_record_contributions_examples():
    cx, _ = single_tet([1, 1, 1, 1])
    st_ = A.ContributionStats.empty(cx)
    assert st_.peak[0] == 0.0
    A.record_contributions(st_, [0.3])
    assert st_.peak[0] == 0.3
    two = A.ContributionStats.empty(cx)
    A.record_contributions(two, [0.2])
    A.record_contributions(two, [0.6])
    assert two.peak[0] == 0.6 and two.views == 2
    np.testing.assert_array_equal(two.vertex_peak(cx), [0.6] * 4)
    with pytest.raises(ValueError):
        A.record_contributions(two, [0.1, 0.2])


@given(st.integers(0, 1000))
def test_vertex_peak_dominates_incident(seed):
    scene = make_scene(seed % 20, 30)
    rng = np.random.default_rng(seed)
    st_ = A.ContributionStats.empty(scene.complex)
    A.record_contributions(st_, rng.uniform(size=scene.complex.n_tets))
    cv = st_.vertex_peak(scene.complex)
    assert np.all(cv[scene.complex.tets] >= st_.peak[:, None])


# --- densification


def test_densify_single_crossing_tet():
    cx, f = single_tet([-1.0, 1.0, 1.0, 1.0])
    scene = Scene(cx, f, Appearance.constant(1), 0.0)
    res = A.densify_surface(scene)
    assert res.scene.complex.n_vertices == 5
    np.testing.assert_allclose(res.scene.complex.vertices[4], cx.centroids[0])
    assert res.scene.sdf[4] == pytest.approx(0.5)


def test_densify_same_sign_is_noop():
    cx, f = single_tet([1.0, 2.0, 1.0, 1.0])
    scene = Scene(cx, f, Appearance.constant(1), 0.0)
    assert A.densify_surface(scene).scene is scene


def test_surface_candidates_budget_and_order():
    scene = make_scene(2, 150)
    cx = scene.complex
    mixed = np.flatnonzero(A.mixed_sign(cx, scene.sdf))
    assert len(mixed) > 10
    fraction = 5.0 / cx.n_tets
    got = A.surface_candidates(cx, scene.sdf, fraction)
    assert len(got) == 5
    r = circumradii(cx)
    expect = sorted(mixed, key=lambda t: (-r[t], t))[:5]
    np.testing.assert_array_equal(got, expect)
    # the cap is the number of crossing tets
    assert len(A.surface_candidates(cx, scene.sdf, 1.0)) == len(mixed)
    assert A.budget(100, 0.05) == 5 and A.budget(101, 0.05) == 6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_densify_then_prune_invariants(seed):
    scene = make_scene(seed, 120)
    k = len(A.surface_candidates(scene.complex, scene.sdf, 0.05))
    res = A.densify_surface(scene, 0.05)
    new = res.scene
    assert new.complex.n_vertices == scene.complex.n_vertices + k
    assert new.generation == scene.generation + 1
    assert check_delaunay(new.complex)
    new.check()
    # carried SDF values equal the old interpolant at the inserted points
    ins = np.flatnonzero(res.vertex_source < 0)
    np.testing.assert_allclose(new.sdf[ins], sdf_eval_many(scene.complex, scene.sdf,
                                                           new.complex.vertices[ins]), atol=1e-12)
    # surviving vertices keep their values
    keep = res.vertex_source >= 0
    np.testing.assert_array_equal(new.sdf[keep], scene.sdf[res.vertex_source[keep]])

    stats = A.ContributionStats.empty(new.complex)
    ids = A.prune_candidates(new.complex, new.sdf, stats, 0.01, new.s)
    assert len(ids) > 0
    pr = A.prune(new, stats, 0.01)
    assert pr.removed == len(ids)
    assert pr.scene.complex.n_vertices == new.complex.n_vertices - len(ids)
    assert check_delaunay(pr.scene.complex)
    assert np.all(np.abs(pr.scene.sdf[pr.scene.complex.hull_vertex_mask]) > 0)
    assert pr.scene.complex.hull_vertex_mask.sum() == new.complex.hull_vertex_mask.sum()


def test_child_tets_keep_parent_colour():
    scene = make_scene(3, 60)
    rng = np.random.default_rng(0)
    scene.appearance.sh[:, :, 0] += rng.normal(0, 0.3, scene.appearance.sh[:, :, 0].shape)
    scene.appearance.grad[:] = rng.normal(0, 0.2, scene.appearance.grad.shape)
    res = A.densify_surface(scene, 0.05)
    new = res.scene
    d = np.array([0.0, 0.0, 1.0])
    fresh = np.flatnonzero(res.tet_source < 0)
    assert len(fresh)
    from tetsdf.geometry import locate_many
    parent = locate_many(scene.complex, new.complex.centroids[fresh], tol=1e-9)
    checked = 0
    for t, p in zip(fresh, parent):
        if p < 0:
            continue
        want = color_eval(scene.appearance, scene.complex.centroids, p, new.complex.centroids[t], d)
        if np.any(want < 1e-3):
            continue
        got = color_eval(new.appearance, new.complex.centroids, t, new.complex.centroids[t], d)
        np.testing.assert_allclose(got, want, rtol=1e-9)
        checked += 1
    assert checked > 0


def test_closest_point_between_rays():
    p = np.array([0.1, 0.2, 0.15])
    got = A.closest_point_between_rays(p - 2 * np.array([1, 0, 0]), [1, 0, 0],
                                       p - 3 * np.array([0, 1, 0]), [0, 1, 0])
    np.testing.assert_allclose(got, p, atol=1e-15)
    d2 = [math.cos(math.radians(0.5)), math.sin(math.radians(0.5)), 0]
    assert A.closest_point_between_rays((0, 0, 0), [1, 0, 0], (0, 1, 0), d2) is None


def test_error_insertion_point_rules():
    cx = delaunay_tetrahedralize(UNIT_TET)
    p = np.array([0.2, 0.2, 0.2])
    got = A.error_insertion_point(cx, 0, p - (1, 0, 0), (1, 0, 0), p - (0, 0, 1), (0, 0, 1))
    np.testing.assert_allclose(got, p, atol=1e-15)
    # near-parallel rays and rays meeting outside the tet fall back to the centroid
    np.testing.assert_allclose(
        A.error_insertion_point(cx, 0, (0, 0, 0), (1, 0, 0), (0, 1e-3, 0), (1, 1e-4, 0)),
        cx.centroids[0])
    q = np.array([2.0, 2.0, 2.0])
    np.testing.assert_allclose(
        A.error_insertion_point(cx, 0, q - (1, 0, 0), (1, 0, 0), q - (0, 1, 0), (0, 1, 0)),
        cx.centroids[0])


def test_densify_error_zero_scores_noop():
    scene = make_scene(4, 40)
    errors = A.ErrorStats.empty(scene.complex)
    assert A.densify_error(scene, errors).scene is scene


def test_error_stats_track_top_two_views():
    scene = make_scene(5, 20)
    m = scene.complex.n_tets
    errors = A.ErrorStats.empty(scene.complex)
    raw = np.zeros((m, 6))
    for k, (err, origin) in enumerate([(0.2, (1, 0, 0)), (0.5, (0, 1, 0)), (0.1, (0, 0, 1))]):
        raw[:] = 0
        raw[0] = (err, err * err, 1.0, 0.0, 0.0, 1.0)
        errors.add_view(raw, np.array(origin, float))
    np.testing.assert_allclose(errors.top_err[0], [0.5, 0.2])
    np.testing.assert_array_equal(errors.top_origin[0], [[0, 1, 0], [1, 0, 0]])
    assert errors.score[0] == pytest.approx(0.8)
    assert errors.score[1:].sum() == 0
    got = A.error_candidates(scene.complex, errors, 1.0)
    np.testing.assert_array_equal(got, [0])
    assert len(A.error_candidates(scene.complex, errors, 1.0, exclude=[0])) == 0


def test_densify_disjoint_budgets():
    scene = make_scene(6, 100)
    errors = A.ErrorStats.empty(scene.complex)
    errors.score[:] = np.random.default_rng(0).uniform(size=scene.complex.n_tets)
    surf = A.surface_candidates(scene.complex, scene.sdf, 0.05)
    err = A.error_candidates(scene.complex, errors, 0.05, exclude=surf)
    assert len(np.intersect1d(surf, err)) == 0
    res = A.densify(scene, errors, 0.05)
    assert res.inserted == len(surf) + len(err)


# --- pruning rule


def test_prune_rule_examples():
    # a 2x2x2 lattice plus one interior vertex whose value we control
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    cx = delaunay_tetrahedralize(np.vstack([corners, [[0.1, 0.05, -0.02]]]))
    sdf = np.full(cx.n_vertices, 0.5)
    s = 64.0
    assert A.band_width(s) == pytest.approx(0.165, abs=1e-3)
    stats = A.ContributionStats.empty(cx)
    stats.peak[:] = 0.005
    np.testing.assert_array_equal(A.prune_candidates(cx, sdf, stats, 0.01, s), [8])
    stats.peak[:] = 0.5
    assert len(A.prune_candidates(cx, sdf, stats, 0.01, s)) == 0
    stats.peak[:] = 0.005
    sdf[8] = 0.1  # inside the band
    assert len(A.prune_candidates(cx, sdf, stats, 0.01, s)) == 0
    stale = A.ContributionStats(np.zeros(cx.n_tets), cx.generation + 1)
    with pytest.raises(ValueError):
        A.prune_candidates(cx, sdf, stale, 0.01, s)
