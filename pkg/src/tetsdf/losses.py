"""Photometric, mesh-consistency, depth-normal and field-regularisation losses.

Every loss accepts ``with_grad``; when set, the gradients with respect to its
direct inputs are returned alongside the value.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import _kernels as K
from .geometry import TetComplex

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
VALID_OPACITY = 0.5


class DimensionMismatch(ValueError):
    pass


@dataclass
class LossWeights:
    mesh: float = 1.0
    field: float = 1.0
    mesh_depth: float = 0.05
    mesh_normal: float = 0.05
    normal_depth: float = 0.05
    eikonal: float = 0.01
    curvature: float = 5e-6
    ssim: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")
            setattr(self, f.name, v)

    @classmethod
    def large_scene(cls, **overrides) -> "LossWeights":
        """Unbounded-scene setting: mesh term x5, no Eikonal term."""
        w = dict(mesh=5.0, eikonal=0.0)
        w.update(overrides)
        return cls(**w)


@dataclass
class LossReport:
    iteration: int
    rgb: float
    mesh: float
    normal_depth: float
    eikonal: float
    curvature: float
    total: float

    CSV_HEADER = "iteration,rgb,mesh,normal_depth,eikonal,curvature,total"

    def csv_line(self) -> str:
        d = asdict(self)
        return ",".join([str(d["iteration"])] + [repr(float(d[k])) for k in
                                                  ("rgb", "mesh", "normal_depth", "eikonal",
                                                   "curvature", "total")])


def total_loss(rgb: float, mesh: float, normal_depth: float, eikonal: float, curvature: float,
               weights: LossWeights, iteration: int = 0) -> LossReport:
    """rgb and mesh already carry their inner weights (SSIM; depth/normal)."""
    field = (weights.normal_depth * normal_depth + weights.eikonal * eikonal
             + weights.curvature * curvature)
    total = rgb + weights.mesh * mesh + weights.field * field
    return LossReport(iteration, float(rgb), float(mesh), float(normal_depth), float(eikonal),
                      float(curvature), float(total))


# --------------------------------------------------------------------------- SSIM


@lru_cache(maxsize=16)
def _blur_matrix(n: int) -> np.ndarray:
    """Gaussian window as an n x n matrix with edge-mirrored (symmetric) padding."""
    r = SSIM_WINDOW // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    k /= k.sum()
    out = np.zeros((n, n))
    for i in range(n):
        for o, w in zip(range(-r, r + 1), k):
            j = (i + o) % (2 * n)
            if j >= n:
                j = 2 * n - 1 - j
            out[i, j] += w
    out.setflags(write=False)
    return out


def _as_hwc(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise DimensionMismatch(f"expected an H x W (x C) image, got shape {a.shape}")
    return a


def _blur(x, ah, aw):
    return np.einsum("ij,jkc,lk->ilc", ah, x, aw, optimize=True)


def _blur_t(x, ah, aw):
    return np.einsum("ji,jkc,kl->ilc", ah, x, aw, optimize=True)


def _ssim_parts(a, b):
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    h, w, _ = a.shape
    ah, aw = _blur_matrix(h), _blur_matrix(w)
    mu_a, mu_b = _blur(a, ah, aw), _blur(b, ah, aw)
    m_aa, m_bb, m_ab = _blur(a * a, ah, aw), _blur(b * b, ah, aw), _blur(a * b, ah, aw)
    var_a, var_b, cov = m_aa - mu_a**2, m_bb - mu_b**2, m_ab - mu_a * mu_b
    n1, n2 = 2 * mu_a * mu_b + SSIM_C1, 2 * cov + SSIM_C2
    d1, d2 = mu_a**2 + mu_b**2 + SSIM_C1, var_a + var_b + SSIM_C2
    return a, b, ah, aw, mu_a, mu_b, n1, n2, d1, d2, n1 * n2 / (d1 * d2)


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel, per-channel SSIM (H, W, C)."""
    return _ssim_parts(a, b)[-1]


def ssim(a, b, with_grad: bool = False):
    """Mean windowed SSIM; the gradient is with respect to ``a``."""
    shape = np.shape(a)
    a, b, ah, aw, mu_a, mu_b, n1, n2, d1, d2, smap = _ssim_parts(a, b)
    value = float(smap.mean())
    if not with_grad:
        return value
    g = smap / smap.size
    g_mu = g * (2 * mu_b / n1 - 2 * mu_b / n2 - 2 * mu_a / d1 + 2 * mu_a / d2)
    g_aa = -g / d2
    g_ab = 2 * g / n2
    grad = _blur_t(g_mu, ah, aw) + 2 * a * _blur_t(g_aa, ah, aw) + b * _blur_t(g_ab, ah, aw)
    return value, grad.reshape(shape)


def loss_rgb(c, target, lam_ssim: float = 0.2, with_grad: bool = False, terms: bool = False):
    """L1 + lam_ssim * (1 - SSIM).  ``terms`` returns the per-element
    contributions (summing to the value) instead."""
    c = np.asarray(c, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if c.shape != target.shape:
        raise DimensionMismatch(f"image shapes differ: {c.shape} vs {target.shape}")
    diff = c - target
    if terms:
        parts = [np.abs(diff).ravel() / diff.size]
        if lam_ssim > 0:
            smap = ssim_map(c, target)
            parts += [np.array([lam_ssim]), -lam_ssim * smap.ravel() / smap.size]
        return np.concatenate(parts)
    l1 = float(np.abs(diff).mean())
    if lam_ssim > 0:
        res = ssim(c, target, with_grad)
        s_val, s_grad = res if with_grad else (res, None)
    else:
        s_val, s_grad = 1.0, None
    value = l1 + lam_ssim * (1.0 - s_val)
    if not with_grad:
        return value
    grad = np.sign(diff) / diff.size
    if s_grad is not None:
        grad = grad - lam_ssim * s_grad
    return value, grad


# --------------------------------------------------------------------------- mesh consistency


def valid_pixels(mask, opacity) -> np.ndarray:
    return np.asarray(mask, dtype=bool) & (np.asarray(opacity) > VALID_OPACITY)


def loss_mesh(depth, normal, mesh_depth, mesh_normal, mask, opacity, lam_md: float = 0.05,
              lam_mn: float = 0.05, with_grad: bool = False, terms: bool = False):
    """Depth and normal agreement between field maps and mesh maps on pixels
    where the mesh is hit and the field is opaque.  Gradients are returned for
    (depth, normal, mesh_depth, mesh_normal)."""
    depth = np.asarray(depth, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    mesh_depth = np.asarray(mesh_depth, dtype=np.float64)
    mesh_normal = np.asarray(mesh_normal, dtype=np.float64)
    valid = valid_pixels(mask, opacity)
    n = int(valid.sum())
    zeros = (np.zeros_like(depth), np.zeros_like(normal), np.zeros_like(depth),
             np.zeros_like(normal))
    if n == 0:
        if terms:
            return np.zeros(2 * depth.size)
        logger.warning("mesh loss has no valid pixels")
        return (0.0, *zeros) if with_grad else 0.0
    diff = np.where(valid, depth - mesh_depth, 0.0)
    dot = np.where(valid, np.sum(normal * mesh_normal, axis=-1), 1.0)
    if terms:
        return np.concatenate([lam_md * np.log1p(np.abs(diff)).ravel() / n,
                               lam_mn * (1.0 - dot).ravel() / n])
    value = (lam_md * np.log1p(np.abs(diff))[valid].sum() + lam_mn * (1.0 - dot)[valid].sum()) / n
    if not with_grad:
        return float(value)
    g_d = np.where(valid, lam_md * np.sign(diff) / (1.0 + np.abs(diff)) / n, 0.0)
    wv = np.where(valid, lam_mn / n, 0.0)[..., None]
    return float(value), g_d, -wv * mesh_normal, -g_d, -wv * normal


# --------------------------------------------------------------------------- depth-normal


def depth_points(depth, camera) -> np.ndarray:
    """Camera-space points from a z-depth map, (H, W, 3)."""
    return np.asarray(depth, dtype=np.float64)[..., None] * camera.pixel_directions()


def depth_normals(depth, camera):
    """Unit camera-facing normals from central differences of the back-projected
    depth map; returns (normals (H-2, W-2, 3), raw cross products, diffs)."""
    p = depth_points(depth, camera)
    dx = p[1:-1, 2:] - p[1:-1, :-2]
    dy = p[2:, 1:-1] - p[:-2, 1:-1]
    m = np.cross(dy, dx)
    norm = np.linalg.norm(m, axis=-1, keepdims=True)
    return m / np.maximum(norm, 1e-300), m, dx, dy


def _nd_valid(opacity) -> np.ndarray:
    ok = np.asarray(opacity) > VALID_OPACITY
    return (ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2] & ok[2:, 1:-1] & ok[:-2, 1:-1])


def loss_nd(depth, normal, opacity, camera, with_grad: bool = False, terms: bool = False):
    """Mean (1 - N . N_D) over interior pixels whose stencil is opaque.
    ``normal`` is world space; gradients are for (depth, normal)."""
    depth = np.asarray(depth, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    h, w = depth.shape
    if h < 3 or w < 3:
        if terms:
            return np.zeros(0)
        return (0.0, np.zeros_like(depth), np.zeros_like(normal)) if with_grad else 0.0
    rot = camera.rotation
    n_cam = normal[1:-1, 1:-1] @ rot.T
    nd, m, dx, dy = depth_normals(depth, camera)
    valid = _nd_valid(opacity) & (np.linalg.norm(m, axis=-1) > 0)
    count = int(valid.sum())
    if count == 0:
        if terms:
            return np.zeros(valid.size)
        return (0.0, np.zeros_like(depth), np.zeros_like(normal)) if with_grad else 0.0
    dot = np.sum(n_cam * nd, axis=-1)
    if terms:
        return np.where(valid, 1.0 - dot, 0.0).ravel() / count
    value = float((1.0 - dot)[valid].sum() / count)
    if not with_grad:
        return value
    wgt = np.where(valid, 1.0 / count, 0.0)[..., None]
    g_normal = np.zeros_like(normal)
    g_normal[1:-1, 1:-1] = (-wgt * nd) @ rot
    g_nd = -wgt * n_cam
    mlen = np.maximum(np.linalg.norm(m, axis=-1, keepdims=True), 1e-300)
    g_m = (g_nd - np.sum(g_nd * nd, axis=-1, keepdims=True) * nd) / mlen
    g_dy = np.cross(dx, g_m)
    g_dx = np.cross(g_m, dy)
    g_p = np.zeros((h, w, 3))
    g_p[1:-1, 2:] += g_dx
    g_p[1:-1, :-2] -= g_dx
    g_p[2:, 1:-1] += g_dy
    g_p[:-2, 1:-1] -= g_dy
    g_depth = np.sum(g_p * camera.pixel_directions(), axis=-1)
    return value, g_depth, g_normal


# --------------------------------------------------------------------------- field regularisers


@dataclass
class FieldStencil:
    """Sparse evaluation operators for +-eps axis offsets around each vertex
    whose full stencil stays inside the hull."""

    vertices: np.ndarray
    eps: np.ndarray
    plus: list
    minus: list
    generation: int

    @property
    def n(self) -> int:
        return len(self.vertices)


def build_stencil(complex_: TetComplex, eps_scale: float = 0.5) -> FieldStencil:
    nv = complex_.n_vertices
    eps = eps_scale * complex_.mean_incident_edge_length()
    x = complex_.vertices
    pts, cols = [], []
    for axis in range(3):
        for sign in (1.0, -1.0):
            q = x.copy()
            q[:, axis] += sign * eps
            pts.append(q)
    allp = np.ascontiguousarray(np.concatenate(pts))
    tets = K.locate_points(allp, complex_.affine, complex_.neighbors, 1e-12)
    tets = tets.reshape(6, nv)
    keep = np.all(tets >= 0, axis=0) & (eps > 0)
    ids = np.nonzero(keep)[0]
    ops = []
    for k in range(6):
        t = tets[k, ids]
        q = pts[k][ids]
        a = complex_.affine[t]
        lam = np.einsum("nij,nj->ni", a[:, :, :3], q) + a[:, :, 3]
        rows = np.repeat(np.arange(len(ids)), 4)
        cols = complex_.tets[t].ravel()
        ops.append(sp.csr_matrix((lam.ravel(), (rows, cols)), shape=(len(ids), nv)))
        del cols
    return FieldStencil(ids, eps[ids], ops[0::2], ops[1::2], complex_.generation)


def loss_field_reg(complex_: TetComplex, sdf, stencil: FieldStencil | None = None,
                   with_grad: bool = False, terms: bool = False):
    """(eikonal, curvature) from central differences of the interpolated field.
    With ``with_grad`` returns (eik, curv, d_eik/d_sdf, d_curv/d_sdf); with
    ``terms`` the per-vertex contributions of both."""
    if stencil is None or stencil.generation != complex_.generation:
        stencil = build_stencil(complex_)
    f = np.asarray(sdf, dtype=np.float64)
    n = stencil.n
    if n == 0:
        z = np.zeros_like(f)
        if terms:
            return np.zeros(0), np.zeros(0)
        return (0.0, 0.0, z, z.copy()) if with_grad else (0.0, 0.0)
    eps = stencil.eps
    fp = [op @ f for op in stencil.plus]
    fm = [op @ f for op in stencil.minus]
    fc = f[stencil.vertices]
    grad = np.stack([(fp[a] - fm[a]) / (2 * eps) for a in range(3)], axis=1)
    gnorm = np.linalg.norm(grad, axis=1)
    lap = sum(fp[a] - 2 * fc + fm[a] for a in range(3)) / eps**2
    if terms:
        return (gnorm - 1.0) ** 2 / n, np.abs(lap) / n
    eik = float(np.mean((gnorm - 1.0) ** 2))
    curv = float(np.mean(np.abs(lap)))
    if not with_grad:
        return eik, curv
    # eikonal
    ge = 2 * (gnorm - 1.0) / n
    unit = grad / np.maximum(gnorm, 1e-300)[:, None]
    d_eik = np.zeros_like(f)
    for a in range(3):
        coef = ge * unit[:, a] / (2 * eps)
        d_eik += stencil.plus[a].T @ coef - stencil.minus[a].T @ coef
    # curvature
    gc = np.sign(lap) / n / eps**2
    d_curv = np.zeros_like(f)
    for a in range(3):
        d_curv += stencil.plus[a].T @ gc + stencil.minus[a].T @ gc
    np.add.at(d_curv, stencil.vertices, -6.0 * gc)
    return eik, curv, d_eik, d_curv
