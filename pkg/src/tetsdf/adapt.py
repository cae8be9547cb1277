"""Grid adaptation: culling band, surface/error densification and pruning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .field import SH_C0, Appearance, Scene, sdf_eval_many, softplus, softplus_inv
from .geometry import TetComplex, circumradii, insert_vertices, locate_many, match_tets, \
    remove_vertices
from .render import TetFlags

logger = logging.getLogger(__name__)

LN199 = math.log(199.0)
CULL_OPACITY = 0.1
PARALLEL_DEG = 1.0


def band_width(s: float) -> float:
    """Width of the interval holding 99% of the logistic density with scale 1/s."""
    if not s > 0:
        raise ValueError("sharpness must be positive")
    return 2.0 * LN199 / s


def _log_phi(x):
    return -np.logaddexp(0.0, -x)


def opacity_upper_bound(f_min, f_max, s):
    """Largest alpha any sub-segment of a tet with these SDF extremes can have."""
    return -np.expm1(_log_phi(s * np.asarray(f_min)) - _log_phi(s * np.asarray(f_max)))


def cull_flags(complex_: TetComplex, sdf, s: float) -> TetFlags:
    f = np.asarray(sdf, dtype=np.float64)[complex_.tets]
    far = np.min(np.abs(f), axis=1) > band_width(s)
    dim = opacity_upper_bound(f.min(axis=1), f.max(axis=1), s) < CULL_OPACITY
    return TetFlags(far & dim, complex_.generation)


# --------------------------------------------------------------------------- statistics


@dataclass
class ContributionStats:
    """Peak compositing weight per tet since the last reset."""

    peak: np.ndarray
    generation: int
    views: int = 0

    @classmethod
    def empty(cls, complex_: TetComplex) -> "ContributionStats":
        return cls(np.zeros(complex_.n_tets), complex_.generation)

    def vertex_peak(self, complex_: TetComplex) -> np.ndarray:
        out = np.zeros(complex_.n_vertices)
        for j in range(4):
            np.maximum.at(out, complex_.tets[:, j], self.peak)
        return out


def record_contributions(stats: ContributionStats, peak) -> ContributionStats:
    """Fold one render's per-tet peak weights into the running maximum."""
    peak = np.asarray(peak, dtype=np.float64)
    if len(peak) != len(stats.peak):
        raise ValueError("peak weights do not match the tet count")
    np.maximum(stats.peak, peak, out=stats.peak)
    stats.views += 1
    return stats


@dataclass
class ErrorStats:
    """Per-tet accumulated residual score and the two views that saw the
    largest residual through each tet, with their weighted mean ray."""

    score: np.ndarray
    top_err: np.ndarray  # (M, 2)
    top_origin: np.ndarray  # (M, 2, 3)
    top_dir: np.ndarray  # (M, 2, 3)
    generation: int
    variance_weight: float = 1.0

    @classmethod
    def empty(cls, complex_: TetComplex, variance_weight: float = 1.0) -> "ErrorStats":
        m = complex_.n_tets
        return cls(np.zeros(m), np.zeros((m, 2)), np.zeros((m, 2, 3)), np.zeros((m, 2, 3)),
                   complex_.generation, variance_weight)

    def add_view(self, raw, origin) -> None:
        """``raw`` holds per tet (sum w r, sum w r^2, sum w, sum w d)."""
        raw = np.asarray(raw, dtype=np.float64)
        wr, wr2, w = raw[:, 0], raw[:, 1], raw[:, 2]
        safe = np.maximum(w, 1e-300)
        var = np.where(w > 0, np.maximum(wr2 / safe - (wr / safe) ** 2, 0.0), 0.0)
        view_score = wr + self.variance_weight * var
        self.score += view_score
        dnorm = np.linalg.norm(raw[:, 3:6], axis=1)
        direction = np.where(dnorm[:, None] > 0, raw[:, 3:6] / np.maximum(dnorm, 1e-300)[:, None], 0)
        first = view_score > self.top_err[:, 0]
        second = ~first & (view_score > self.top_err[:, 1])
        for sel, slot in ((first, 0), (second, 1)):
            if slot == 0:
                self.top_err[sel, 1] = self.top_err[sel, 0]
                self.top_origin[sel, 1] = self.top_origin[sel, 0]
                self.top_dir[sel, 1] = self.top_dir[sel, 0]
            self.top_err[sel, slot] = view_score[sel]
            self.top_origin[sel, slot] = origin
            self.top_dir[sel, slot] = direction[sel]


# --------------------------------------------------------------------------- edits


@dataclass
class SceneEdit:
    """A rebuilt scene plus, per new vertex / tet, the id of the identical old
    element (-1 for fresh ones).  Used to carry optimizer moments."""

    scene: Scene
    vertex_source: np.ndarray
    tet_source: np.ndarray
    inserted: int = 0
    removed: int = 0


def _identity_edit(scene: Scene) -> SceneEdit:
    return SceneEdit(scene, np.arange(scene.complex.n_vertices), np.arange(scene.complex.n_tets))


def _rebuild(scene: Scene, edit, new_sdf_values=None) -> SceneEdit:
    old, new = scene.complex, edit.complex
    vmap = edit.vertex_map
    sdf = np.zeros(new.n_vertices)
    alive = vmap >= 0
    sdf[vmap[alive]] = scene.sdf[alive]
    if len(edit.new_vertices):
        sdf[edit.new_vertices] = new_sdf_values
    vertex_source = np.full(new.n_vertices, -1, dtype=np.int64)
    vertex_source[vmap[alive]] = np.nonzero(alive)[0]

    tet_source = match_tets(old, new, vmap)
    parent = tet_source.copy()
    fresh = parent < 0
    if np.any(fresh):
        parent[fresh] = locate_many(old, new.centroids[fresh], tol=1e-9)
        lost = parent < 0
        if np.any(lost):  # centroid on the old hull within round-off
            from scipy.spatial import cKDTree

            _, near = cKDTree(old.centroids).query(new.centroids[lost])
            parent[lost] = near
    app = scene.appearance
    appearance = Appearance(app.sh[parent].copy(), app.grad[parent].copy(), app.degree)
    if np.any(fresh):
        # colour is linear about the tet centroid: re-centre the base colour so
        # the child reproduces the parent's colour at its own centroid
        ids = np.nonzero(fresh)[0]
        shift = np.einsum("ncj,nj->nc", appearance.grad[ids],
                          new.centroids[ids] - old.centroids[parent[ids]])
        dc = appearance.sh[ids, :, 0] * SH_C0
        target = np.maximum(softplus(dc) + shift, 1e-4)
        appearance.sh[ids, :, 0] = softplus_inv(target) / SH_C0
    out = Scene(new, sdf, appearance, scene.log_s, scene.background)
    return SceneEdit(out, vertex_source, tet_source)


def insert_points(scene: Scene, points) -> SceneEdit:
    c = scene.complex
    edit = insert_vertices(c, points, carry=lambda p: sdf_eval_many(c, scene.sdf, p))
    if len(edit.new_vertices) == 0:
        return _identity_edit(scene)
    vals = edit.carried
    if np.any(np.isnan(vals)):
        raise ValueError("insertion point outside the hull")
    res = _rebuild(scene, edit, vals)
    res.inserted = len(edit.new_vertices)
    return res


def mixed_sign(complex_: TetComplex, sdf) -> np.ndarray:
    f = np.asarray(sdf)[complex_.tets]
    return (f.min(axis=1) < 0) & (f.max(axis=1) > 0)


def budget(n_tets: int, fraction: float) -> int:
    return int(math.ceil(fraction * n_tets))


def surface_candidates(complex_: TetComplex, sdf, fraction: float = 0.05) -> np.ndarray:
    """Ids of the crossing tets with the largest circumradius, at most
    ceil(fraction * M) of them."""
    mixed = np.nonzero(mixed_sign(complex_, sdf))[0]
    k = min(budget(complex_.n_tets, fraction), len(mixed))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    r = circumradii(complex_)[mixed]
    order = np.lexsort((mixed, -r))
    return mixed[order[:k]]


def densify_surface(scene: Scene, fraction: float = 0.05) -> SceneEdit:
    chosen = surface_candidates(scene.complex, scene.sdf, fraction)
    if len(chosen) == 0:
        return _identity_edit(scene)
    res = insert_points(scene, scene.complex.centroids[chosen])
    logger.info("surface densification: %d tets split", res.inserted)
    return res


def closest_point_between_rays(o1, d1, o2, d2):
    """Midpoint of the shortest segment between two lines, or None when they
    are within ``PARALLEL_DEG`` of parallel."""
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    d1 = d1 / np.linalg.norm(d1)
    d2 = d2 / np.linalg.norm(d2)
    cross = np.linalg.norm(np.cross(d1, d2))
    if cross < math.sin(math.radians(PARALLEL_DEG)):
        return None
    w = np.asarray(o1, dtype=np.float64) - np.asarray(o2, dtype=np.float64)
    b = d1 @ d2
    d, e = d1 @ w, d2 @ w
    den = 1.0 - b * b
    t1 = (b * e - d) / den
    t2 = (e - b * d) / den
    return 0.5 * ((o1 + t1 * d1) + (o2 + t2 * d2))


def error_insertion_point(complex_: TetComplex, tet: int, o1, d1, o2, d2) -> np.ndarray:
    if np.any(np.asarray(d1) != 0) and np.any(np.asarray(d2) != 0):
        p = closest_point_between_rays(o1, d1, o2, d2)
        if p is not None:
            a = complex_.affine[tet]
            lam = a[:, :3] @ p + a[:, 3]
            if np.all(lam > 0):
                return p
    return complex_.centroids[tet]


def error_candidates(complex_: TetComplex, errors: ErrorStats, fraction: float = 0.05,
                     exclude=()) -> np.ndarray:
    if errors.generation != complex_.generation:
        raise ValueError("error statistics refer to another complex generation")
    eligible = errors.score > 0
    eligible[np.asarray(list(exclude), dtype=np.int64)] = False
    ids = np.nonzero(eligible)[0]
    k = min(budget(complex_.n_tets, fraction), len(ids))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((ids, -errors.score[ids]))
    return ids[order[:k]]


def densify_error(scene: Scene, errors: ErrorStats, fraction: float = 0.05,
                  exclude=()) -> SceneEdit:
    c = scene.complex
    chosen = error_candidates(c, errors, fraction, exclude)
    if len(chosen) == 0:
        return _identity_edit(scene)
    pts = np.array([error_insertion_point(c, t, errors.top_origin[t, 0], errors.top_dir[t, 0],
                                          errors.top_origin[t, 1], errors.top_dir[t, 1])
                    for t in chosen])
    res = insert_points(scene, pts)
    logger.info("error densification: %d tets split", res.inserted)
    return res


def densify(scene: Scene, errors: ErrorStats | None, fraction: float = 0.05,
            surface: bool = True, error: bool = True) -> SceneEdit:
    """Surface budget first, then an independent error budget over the
    remaining tets; all points inserted in one rebuild."""
    c = scene.complex
    surf = surface_candidates(c, scene.sdf, fraction) if surface else np.zeros(0, dtype=np.int64)
    pts = [c.centroids[surf]]
    if error and errors is not None:
        err = error_candidates(c, errors, fraction, exclude=surf)
        pts.append(np.array([error_insertion_point(
            c, t, errors.top_origin[t, 0], errors.top_dir[t, 0], errors.top_origin[t, 1],
            errors.top_dir[t, 1]) for t in err]).reshape(-1, 3))
    pts = np.concatenate(pts)
    if len(pts) == 0:
        return _identity_edit(scene)
    res = insert_points(scene, pts)
    logger.info("densify: %d surface + %d error candidates, %d vertices inserted",
                len(surf), len(pts) - len(surf), res.inserted)
    return res


def prune_candidates(complex_: TetComplex, sdf, stats: ContributionStats, tau_c: float,
                     s: float) -> np.ndarray:
    if stats.generation != complex_.generation:
        raise ValueError("contribution statistics refer to another complex generation")
    cv = stats.vertex_peak(complex_)
    far = np.abs(np.asarray(sdf)) > band_width(s)
    return np.nonzero((cv < tau_c) & far & ~complex_.hull_vertex_mask)[0]


def prune(scene: Scene, stats: ContributionStats, tau_c: float = 0.01) -> SceneEdit:
    ids = prune_candidates(scene.complex, scene.sdf, stats, tau_c, scene.s)
    if len(ids) == 0:
        return _identity_edit(scene)
    edit = remove_vertices(scene.complex, ids)
    res = _rebuild(scene, edit)
    res.removed = len(ids)
    logger.info("prune: %d vertices removed", len(ids))
    return res
