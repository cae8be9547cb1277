"""Piecewise-linear SDF on the grid vertices and per-tet linear colour model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import OUTSIDE, TetComplex, locate

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = np.array([1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                  -1.0925484305920792, 0.5462742152960396])
DEGENERATE_GRAD = 1e-12


class OutsideHull(ValueError):
    pass


class GenerationMismatch(RuntimeError):
    pass


def sh_basis(d, degree: int) -> np.ndarray:
    """Real spherical-harmonic basis, (..., (degree+1)**2)."""
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * z * z - x * x - y * y),
                SH_C2[3] * x * z, SH_C2[4] * (x * x - y * y)]
    return np.stack(out, axis=-1)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    return np.log(np.expm1(y))


@dataclass(eq=False)
class Appearance:
    """Per-tet SH coefficients (M, 3, (L+1)^2) for the base colour and a
    linear colour gradient (M, 3, 3) in colour per scene unit."""

    sh: np.ndarray
    grad: np.ndarray
    degree: int = 0

    @classmethod
    def constant(cls, n_tets: int, rgb=(0.5, 0.5, 0.5), degree: int = 0) -> "Appearance":
        nb = (degree + 1) ** 2
        sh = np.zeros((n_tets, 3, nb))
        sh[:, :, 0] = softplus_inv(np.asarray(rgb, dtype=np.float64)) / SH_C0
        return cls(sh, np.zeros((n_tets, 3, 3)), degree)


@dataclass(eq=False)
class Scene:
    """Everything the renderer reads: the complex, vertex SDF values,
    appearance, and the latent sharpness ``log_s``."""

    complex: TetComplex
    sdf: np.ndarray
    appearance: Appearance
    log_s: float
    background: tuple = (0.0, 0.0, 0.0)

    @property
    def s(self) -> float:
        return float(np.exp(self.log_s))

    @property
    def generation(self) -> int:
        return self.complex.generation

    def check(self) -> None:
        c = self.complex
        if len(self.sdf) != c.n_vertices:
            raise GenerationMismatch(f"sdf has {len(self.sdf)} values for {c.n_vertices} vertices")
        if len(self.appearance.sh) != c.n_tets or len(self.appearance.grad) != c.n_tets:
            raise GenerationMismatch("appearance blocks do not match the tet count")

    def copy(self) -> "Scene":
        app = Appearance(self.appearance.sh.copy(), self.appearance.grad.copy(), self.appearance.degree)
        return Scene(self.complex, self.sdf.copy(), app, float(self.log_s), tuple(self.background))


def sdf_eval(complex_: TetComplex, sdf, p, hint: int | None = None) -> float:
    tet = locate(complex_, p, hint)
    if tet == OUTSIDE:
        raise OutsideHull(f"point {tuple(np.asarray(p))} is outside the hull")
    return sdf_eval_in(complex_, sdf, tet, p)


def sdf_eval_in(complex_: TetComplex, sdf, tet: int, p) -> float:
    a = complex_.affine[tet]
    lam = a[:, :3] @ np.asarray(p, dtype=np.float64) + a[:, 3]
    return float(lam @ np.asarray(sdf)[complex_.tets[tet]])


def sdf_eval_many(complex_: TetComplex, sdf, points, tets=None) -> np.ndarray:
    """Vectorised evaluation; NaN for points outside the hull."""
    from .geometry import locate_many

    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tets = locate_many(complex_, pts) if tets is None else np.asarray(tets)
    out = np.full(len(pts), np.nan)
    ok = tets >= 0
    a = complex_.affine[tets[ok]]
    lam = np.einsum("nij,nj->ni", a[:, :, :3], pts[ok]) + a[:, :, 3]
    out[ok] = np.sum(lam * np.asarray(sdf)[complex_.tets[tets[ok]]], axis=1)
    return out


def tet_gradients(complex_: TetComplex, sdf) -> np.ndarray:
    """Constant gradient of the linear interpolant in every tet, (M, 3)."""
    f = np.asarray(sdf)[complex_.tets]  # (M, 4)
    return np.einsum("mj,mjk->mk", f, complex_.affine[:, :, :3])


def unit_normals(grads: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(grads, axis=1, keepdims=True)
    out = np.zeros_like(grads)
    ok = norm[:, 0] >= DEGENERATE_GRAD
    out[ok] = grads[ok] / norm[ok]
    return out


def tet_gradient(complex_: TetComplex, sdf, tet: int):
    """Returns (gradient, unit normal, degenerate flag) for one tet."""
    f = np.asarray(sdf)[complex_.tets[tet]]
    grad = f @ complex_.affine[tet, :, :3]
    norm = np.linalg.norm(grad)
    if norm < DEGENERATE_GRAD:
        return grad, np.zeros(3), True
    return grad, grad / norm, False


def base_color(appearance: Appearance, tet: int, d) -> np.ndarray:
    y = sh_basis(d, appearance.degree)
    return softplus(appearance.sh[tet] @ y)


def color_eval(appearance: Appearance, centroids, tet: int, p, d) -> np.ndarray:
    """c0(d) + grad . (p - centroid), clamped at zero per channel."""
    c0 = base_color(appearance, tet, d)
    offset = np.asarray(p, dtype=np.float64) - centroids[tet]
    return np.maximum(c0 + appearance.grad[tet] @ offset, 0.0)


def sharpness_for_band(band: float) -> float:
    """Sharpness whose 99% logistic band has the given width."""
    return 2.0 * np.log(199.0) / band
