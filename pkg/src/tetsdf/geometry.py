"""Delaunay tetrahedral complex: construction, predicates, point location, edits."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay, cKDTree

logger = logging.getLogger(__name__)

HULL = -1
OUTSIDE = -1
MERGE_TOL = 1e-9
PREDICATE_TOL = 1e-12


class DegenerateInput(ValueError):
    pass


class WalkCycle(RuntimeError):
    pass


class HullVertexRemoval(ValueError):
    pass


def orient3d(a, b, c, d):
    """Six times the signed volume of (a, b, c, d); positive for our orientation."""
    a, b, c, d = (np.asarray(x, dtype=np.float64) for x in (a, b, c, d))
    return np.einsum("...i,...i->...", np.cross(b - a, c - a), d - a)


def insphere(a, b, c, d, e):
    """Positive when e lies strictly inside the circumsphere of the positively
    oriented tet (a, b, c, d), zero when cospherical."""
    rows = []
    for p in (a, b, c, d):
        q = np.asarray(p, dtype=np.float64) - np.asarray(e, dtype=np.float64)
        rows.append(np.concatenate([q, [q @ q]]))
    m = np.array(rows)
    return -np.linalg.det(m) * np.sign(orient3d(a, b, c, d))


def _volumes(points, tets):
    v = points[tets]
    return orient3d(v[:, 0], v[:, 1], v[:, 2], v[:, 3]) / 6.0


@dataclass(eq=False)
class TetComplex:
    """Vertices and positively oriented tets; ``neighbors[t, i]`` is the tet
    across the face opposite ``tets[t, i]`` (``HULL`` on the boundary)."""

    vertices: np.ndarray
    tets: np.ndarray
    neighbors: np.ndarray
    generation: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @cached_property
    def affine(self) -> np.ndarray:
        """(M, 4, 4) maps with ``lambda = A[:, :, :3] @ x + A[:, :, 3]``."""
        v = self.vertices[self.tets]  # (M, 4, 3)
        m = np.ones((len(self.tets), 4, 4))
        m[:, :3, :] = np.transpose(v, (0, 2, 1))
        return np.linalg.inv(m)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    @cached_property
    def volumes(self) -> np.ndarray:
        return _volumes(self.vertices, self.tets)

    @cached_property
    def neighbor_faces(self) -> np.ndarray:
        """Local index of the shared face as seen from the neighbor."""
        out = np.full_like(self.neighbors, -1)
        t, i = np.nonzero(self.neighbors >= 0)
        n = self.neighbors[t, i]
        match = self.neighbors[n] == t[:, None]
        out[t, i] = np.argmax(match, axis=1)
        return out

    @cached_property
    def hull_faces(self) -> np.ndarray:
        """(F, 2) array of (tet, local face) pairs on the convex hull."""
        t, i = np.nonzero(self.neighbors == HULL)
        return np.stack([t, i], axis=1)

    @cached_property
    def hull_vertex_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        for t, i in self.hull_faces:
            mask[np.delete(self.tets[t], i)] = True
        return mask

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique sorted vertex pairs of all tet edges."""
        pairs = self.tets[:, [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]].reshape(-1, 2)
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)

    def mean_incident_edge_length(self) -> np.ndarray:
        e = self.edges
        length = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
        total = np.bincount(e.ravel(), weights=np.repeat(length, 2), minlength=self.n_vertices)
        count = np.bincount(e.ravel(), minlength=self.n_vertices)
        return total / np.maximum(count, 1)

    def vertex_tets(self):
        """CSR-style incidence: (offsets, tet ids) per vertex."""
        flat = self.tets.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=self.n_vertices)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return offsets, order // 4


def _validate_points(points: np.ndarray) -> np.ndarray:
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DegenerateInput(f"expected (n, 3) points, got {points.shape}")
    if len(points) < 4:
        raise DegenerateInput("need at least 4 points")
    if not np.all(np.isfinite(points)):
        raise DegenerateInput("non-finite coordinates")
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[2] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateInput("points are coplanar")
    pairs = cKDTree(points).query_pairs(MERGE_TOL)
    if pairs:
        i, j = sorted(pairs)[0]
        raise DegenerateInput(f"points {i} and {j} closer than {MERGE_TOL}")
    return points


def _qhull(points: np.ndarray):
    scale = np.ptp(points, axis=0).max()
    vol_tol = 1e-12 * scale**3
    for options in ("Qbb Qc Qz Q12 Qt", "QJ Qbb"):
        tri = Delaunay(points, qhull_options=options)
        tets = tri.simplices.astype(np.int64)
        nbr = tri.neighbors.astype(np.int64)
        vol = _volumes(points, tets)
        if len(tri.coplanar) == 0 and np.all(np.abs(vol) > vol_tol):
            return tets, nbr, vol
        logger.debug("qhull %r produced flat tets; retrying with joggle", options)
    raise DegenerateInput("could not build a non-degenerate tetrahedralization")


def delaunay_tetrahedralize(points, generation: int = 0) -> TetComplex:
    points = _validate_points(points)
    tets, nbr, vol = _qhull(points)
    flip = vol < 0
    tets[flip] = tets[flip][:, [1, 0, 2, 3]]
    nbr[flip] = nbr[flip][:, [1, 0, 2, 3]]
    complex_ = TetComplex(points, tets, nbr, generation)
    check_adjacency(complex_)
    return complex_


def check_adjacency(complex_: TetComplex) -> None:
    nbr = complex_.neighbors
    t, i = np.nonzero(nbr >= 0)
    back = nbr[nbr[t, i]]
    if not np.all(np.any(back == t[:, None], axis=1)):
        raise RuntimeError("asymmetric tet adjacency")


def circumcenters(complex_: TetComplex, tets=None):
    """Circumcenters and radii; degenerate tets get radius +inf."""
    idx = np.arange(complex_.n_tets) if tets is None else np.atleast_1d(tets)
    v = complex_.vertices[complex_.tets[idx]]
    a = 2.0 * (v[:, 1:] - v[:, :1])
    b = np.sum(v[:, 1:] ** 2, axis=2) - np.sum(v[:, :1] ** 2, axis=2)
    cond = np.linalg.cond(a)
    ok = cond < 1e12
    center = np.full((len(idx), 3), np.nan)
    if np.any(ok):
        center[ok] = np.linalg.solve(a[ok], b[ok][..., None])[..., 0]
    radius = np.full(len(idx), np.inf)
    radius[ok] = np.linalg.norm(center[ok] - v[ok, 0], axis=1)
    return center, radius


def circumradius(complex_: TetComplex, tet: int) -> float:
    return float(circumcenters(complex_, [tet])[1][0])


def circumradii(complex_: TetComplex) -> np.ndarray:
    return circumcenters(complex_)[1]


def barycentric(complex_: TetComplex, tet: int, p) -> np.ndarray:
    v = complex_.vertices[complex_.tets[tet]]
    m = np.vstack([v.T, np.ones(4)])
    lam = np.linalg.solve(m, np.append(np.asarray(p, dtype=np.float64), 1.0))
    return lam


def _contains(complex_, tet, p, tol):
    lam = complex_.affine[tet, :, :3] @ p + complex_.affine[tet, :, 3]
    return lam, bool(np.all(lam >= -tol))


def locate(complex_: TetComplex, p, hint: int | None = None, tol: float = 1e-12) -> int:
    """Tet containing ``p`` (lowest id on shared boundaries) or ``OUTSIDE``."""
    p = np.asarray(p, dtype=np.float64)
    tet = 0 if hint is None or hint < 0 else int(hint)
    visited = set()
    while True:
        if tet in visited:
            raise WalkCycle(f"point location revisited tet {tet}")
        visited.add(tet)
        lam, inside = _contains(complex_, tet, p, tol)
        if inside:
            break
        face = int(np.argmin(lam))
        nxt = complex_.neighbors[tet, face]
        if nxt == HULL:
            return OUTSIDE
        tet = int(nxt)
    # every tet holding p is reachable through faces that contain p
    best, stack, seen = tet, [tet], {tet}
    while stack:
        t = stack.pop()
        lam, _ = _contains(complex_, t, p, tol)
        for i in np.nonzero(lam <= tol)[0]:
            n = int(complex_.neighbors[t, i])
            if n == HULL or n in seen:
                continue
            seen.add(n)
            if _contains(complex_, n, p, tol)[1]:
                best = min(best, n)
                stack.append(n)
    return best


def locate_many(complex_: TetComplex, points, tol: float = 1e-12) -> np.ndarray:
    """Vectorised location (no tie-break), ``OUTSIDE`` for points off the hull."""
    from ._kernels import locate_points

    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    return locate_points(pts, complex_.affine, complex_.neighbors, tol)


def check_delaunay(complex_: TetComplex, tol: float = 1e-9) -> bool:
    """Exhaustive empty-circumsphere check (quadratic; meant for small n)."""
    center, radius = circumcenters(complex_)
    if not np.all(np.isfinite(radius)):
        return False
    pts = complex_.vertices
    ok = True
    for start in range(0, complex_.n_tets, 256):
        c = center[start:start + 256]
        r2 = radius[start:start + 256] ** 2
        d2 = np.sum((pts[None, :, :] - c[:, None, :]) ** 2, axis=2)
        inside = d2 < r2[:, None] * (1.0 - tol)
        own = complex_.tets[start:start + 256]
        inside[np.arange(len(own))[:, None], own] = False
        ok &= not np.any(inside)
    return ok


@dataclass
class Edit:
    """Result of a topology edit: the new complex and the vertex id mapping."""

    complex: TetComplex
    vertex_map: np.ndarray  # old id -> new id, -1 if removed
    new_vertices: np.ndarray  # ids of inserted vertices in the new complex
    carried: object = None


def insert_vertices(complex_: TetComplex, points, carry=None) -> Edit:
    """Insert points, dropping any within ``MERGE_TOL`` of existing vertices or
    of each other.  ``carry(points)`` is evaluated on the accepted points
    against the pre-insertion complex and its result returned as ``carried``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    identity = np.arange(complex_.n_vertices)
    if len(points):
        dist, _ = cKDTree(complex_.vertices).query(points)
        keep = dist > MERGE_TOL
        for i in range(len(points)):
            if keep[i] and i + 1 < len(points):
                close = np.linalg.norm(points[i + 1:] - points[i], axis=1) <= MERGE_TOL
                keep[i + 1:][close] = False
        if not np.all(keep):
            logger.info("rejected %d near-duplicate insertion points", int(np.sum(~keep)))
        points = points[keep]
    if len(points) == 0:
        return Edit(complex_, identity, np.zeros(0, dtype=np.int64), None)
    carried = carry(points) if carry is not None else None
    new = delaunay_tetrahedralize(np.vstack([complex_.vertices, points]), complex_.generation + 1)
    new_ids = np.arange(complex_.n_vertices, new.n_vertices)
    return Edit(new, identity, new_ids, carried)


def remove_vertices(complex_: TetComplex, ids) -> Edit:
    ids = np.unique(np.asarray(list(ids), dtype=np.int64))
    identity = np.arange(complex_.n_vertices)
    if len(ids) == 0:
        return Edit(complex_, identity, np.zeros(0, dtype=np.int64))
    if np.any(complex_.hull_vertex_mask[ids]):
        bad = ids[complex_.hull_vertex_mask[ids]]
        raise HullVertexRemoval(f"hull vertices cannot be removed: {bad[:8].tolist()}")
    keep = np.ones(complex_.n_vertices, dtype=bool)
    keep[ids] = False
    vmap = np.full(complex_.n_vertices, -1, dtype=np.int64)
    vmap[keep] = np.arange(int(keep.sum()))
    new = delaunay_tetrahedralize(complex_.vertices[keep], complex_.generation + 1)
    return Edit(new, vmap, np.zeros(0, dtype=np.int64))


def match_tets(old: TetComplex, new: TetComplex, vertex_map: np.ndarray) -> np.ndarray:
    """For each new tet, the old tet with the same vertex set, else -1."""
    mapped = vertex_map[old.tets]
    valid = np.all(mapped >= 0, axis=1)
    key_old = np.sort(mapped[valid], axis=1)
    key_new = np.sort(new.tets, axis=1)
    lookup = {tuple(k): t for k, t in zip(key_old.tolist(), np.nonzero(valid)[0].tolist())}
    return np.array([lookup.get(tuple(k), -1) for k in key_new.tolist()], dtype=np.int64)
