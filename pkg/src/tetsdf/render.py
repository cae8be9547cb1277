"""Differentiable volume rendering of the tetrahedral SDF.

Rays walk the complex through face adjacency; each traversed tet yields an
exact [t_in, t_out] interval whose opacity comes from the logistic CDF of the
SDF at its endpoints.  The same walk also reports the first zero crossing,
which is exactly where a ray would hit the marching-tets surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.special import expit

from . import _kernels as K
from .field import (GenerationMismatch, Scene, color_eval, tet_gradient, tet_gradients,
                    unit_normals)
from .geometry import OUTSIDE, TetComplex, locate

T_MIN = K.T_MIN


class WalkStall(RuntimeError):
    pass


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(3, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise ValueError("world_to_camera rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    def pixel_directions(self):
        """Camera-space unnormalised directions (H, W, 3) with z = 1."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        return np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy,
                         np.ones_like(uu)], axis=-1)

    def rays(self):
        """Origin (3,), unit world directions (H*W, 3), and per-ray cosine to the
        optical axis (converts ray distance to z-depth)."""
        d = self.pixel_directions().reshape(-1, 3)
        norm = np.linalg.norm(d, axis=1)
        world = (d / norm[:, None]) @ self.rotation
        return self.center, np.ascontiguousarray(world), 1.0 / norm


@dataclass
class SegmentList:
    tet: np.ndarray
    t_in: np.ndarray
    t_out: np.ndarray
    f_in: np.ndarray
    f_out: np.ndarray

    def __len__(self):
        return len(self.tet)


def trace_ray(complex_: TetComplex, origin, direction, sdf=None) -> SegmentList:
    """Front-to-back tet intervals along a ray (zero-length hops dropped)."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    start = locate(complex_, o)
    cap = 4 * complex_.n_tets + 64
    tet, t_in, t_out, n, used = K.trace(o, d, complex_.affine, complex_.neighbors,
                                        complex_.neighbor_faces, complex_.hull_faces,
                                        start, cap)
    if n < 0:
        raise WalkStall("ray walk stalled twice")
    keep = t_out > t_in
    tet, t_in, t_out = tet[keep], t_in[keep], t_out[keep]
    f_in = np.full(len(tet), np.nan)
    f_out = np.full(len(tet), np.nan)
    if sdf is not None:
        f = np.asarray(sdf)[complex_.tets[tet]]
        a = complex_.affine[tet]
        for ts, out in ((t_in, f_in), (t_out, f_out)):
            x = used[None, :] + ts[:, None] * d[None, :]
            lam = np.einsum("nij,nj->ni", a[:, :, :3], x) + a[:, :, 3]
            out[:] = np.sum(lam * f, axis=1)
    return SegmentList(tet, t_in, t_out, f_in, f_out)


def logistic(x, s):
    return expit(s * np.asarray(x, dtype=np.float64))


def segment_alpha(f_prev, f_next, s):
    """Interval opacity max((Phi(f_prev) - Phi(f_next)) / Phi(f_prev), 0)."""
    f_prev = np.asarray(f_prev, dtype=np.float64)
    f_next = np.asarray(f_next, dtype=np.float64)
    big = (np.abs(s * f_prev) > 30) | (np.abs(s * f_next) > 30)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        direct = (logistic(f_prev, s) - logistic(f_next, s)) / logistic(f_prev, s)
        # log Phi(x) = -log(1 + exp(-s x))
        ratio = np.exp(np.logaddexp(0.0, -s * f_prev) - np.logaddexp(0.0, -s * f_next))
    alpha = np.where(big, 1.0 - ratio, direct)
    alpha = np.maximum(alpha, 0.0)
    return float(alpha) if alpha.ndim == 0 else alpha


def composite(alphas, colors, mids=None, normals=None, background=(0.0, 0.0, 0.0), t_min=T_MIN):
    """Front-to-back alpha compositing with early termination.

    Returns (color, depth, normal, opacity); depth is the weighted mean of
    ``mids`` with zero background, the normal is renormalised.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = len(alphas)
    mids = np.zeros(n) if mids is None else np.asarray(mids, dtype=np.float64)
    normals = np.zeros((n, 3)) if normals is None else np.asarray(normals, dtype=np.float64)
    T = 1.0
    color = np.zeros(3)
    depth = 0.0
    nacc = np.zeros(3)
    for k in range(n):
        w = T * alphas[k]
        color += w * colors[k]
        depth += w * mids[k]
        nacc += w * normals[k]
        T *= 1.0 - alphas[k]
        if T < t_min:
            break
    color += T * np.asarray(background, dtype=np.float64)
    norm = np.linalg.norm(nacc)
    normal = nacc / norm if norm > K.GRAD_EPS else np.zeros(3)
    return color, depth, normal, 1.0 - T


def composite_pixel(segments: SegmentList, scene: Scene, origin, direction,
                    cull=None, background=None):
    """Reference (per-ray, pure numpy) evaluation of one pixel."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    o = np.asarray(origin, dtype=np.float64)
    centroids = scene.complex.centroids
    alphas, colors, mids, normals = [], [], [], []
    for k, t0, t1, f0, f1 in zip(segments.tet, segments.t_in, segments.t_out,
                                 segments.f_in, segments.f_out):
        if cull is not None and cull[k]:
            continue
        alphas.append(segment_alpha(f0, f1, scene.s))
        c_in = color_eval(scene.appearance, centroids, k, o + t0 * d, d)
        c_out = color_eval(scene.appearance, centroids, k, o + t1 * d, d)
        colors.append(0.5 * (c_in + c_out))
        mids.append(0.5 * (t0 + t1))
        normals.append(tet_gradient(scene.complex, scene.sdf, k)[1])
    bg = scene.background if background is None else background
    return composite(alphas, colors, mids, normals, bg)


@dataclass
class TetFlags:
    """Per-tet boolean mask stamped with the complex generation it refers to."""

    mask: np.ndarray
    generation: int


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    opacity: np.ndarray
    mesh_depth: np.ndarray
    mesh_normal: np.ndarray
    mesh_mask: np.ndarray
    generation: int
    peak: np.ndarray | None = None
    aux: dict = field(default_factory=dict, repr=False)


@dataclass
class OutputGrads:
    """Upstream gradients with respect to every rendered map."""

    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    opacity: np.ndarray
    mesh_depth: np.ndarray
    mesh_normal: np.ndarray

    @classmethod
    def zeros(cls, height: int, width: int) -> "OutputGrads":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width)),
                   np.zeros((height, width, 3)), np.zeros((height, width)),
                   np.zeros((height, width)), np.zeros((height, width, 3)))


@dataclass
class GradSet:
    sdf: np.ndarray
    sh: np.ndarray
    color_grad: np.ndarray
    log_s: float
    stats: np.ndarray | None = None


def _kernel_inputs(scene: Scene, camera: Camera, cull):
    scene.check()
    c = scene.complex
    if cull is None:
        mask = np.zeros(c.n_tets, dtype=bool)
    else:
        if isinstance(cull, TetFlags):
            if cull.generation != c.generation:
                raise GenerationMismatch("cull flags refer to another complex generation")
            mask = cull.mask
        else:
            mask = np.asarray(cull, dtype=bool)
        if len(mask) != c.n_tets:
            raise GenerationMismatch("cull flags do not match the tet count")
    origin, dirs, cosz = camera.rays()
    start = locate(c, origin)
    tgrad = tet_gradients(c, scene.sdf)
    return dict(
        origin=np.ascontiguousarray(origin, dtype=np.float64), dirs=dirs, cosz=cosz,
        start_tet=int(start) if start != OUTSIDE else -1,
        A=c.affine, nbr=c.neighbors, nbr_face=c.neighbor_faces,
        hull=np.ascontiguousarray(c.hull_faces), tets=c.tets,
        sdf=np.ascontiguousarray(scene.sdf, dtype=np.float64),
        sh=np.ascontiguousarray(scene.appearance.sh), degree=scene.appearance.degree,
        G=np.ascontiguousarray(scene.appearance.grad), O=c.centroids,
        tgrad=tgrad, tnorm=unit_normals(tgrad), s=scene.s,
        bg=np.asarray(scene.background, dtype=np.float64),
        cull=np.ascontiguousarray(mask),
    )


def render_view(scene: Scene, camera: Camera, cull=None, collect_peak: bool = False) -> RenderOutput:
    """Render colour, z-depth, normal and opacity, plus the depth/normal/mask of
    the first zero crossing along each ray."""
    kin = _kernel_inputs(scene, camera, cull)
    max_steps = 4 * scene.complex.n_tets + 64
    (color, depth, normal, nlen, opacity, steps, status, m_depth, m_normal, m_tet,
     peak) = K.render_forward(kin["origin"], kin["dirs"], kin["cosz"], kin["start_tet"],
                              kin["A"], kin["nbr"], kin["nbr_face"], kin["hull"], kin["tets"],
                              kin["sdf"], kin["sh"], kin["degree"], kin["G"], kin["O"],
                              kin["tnorm"], kin["s"], kin["bg"], kin["cull"], max_steps,
                              collect_peak)
    if np.any(status == 2):
        raise WalkStall(f"{int(np.sum(status == 2))} rays stalled after re-trace")
    h, w = camera.height, camera.width
    out = RenderOutput(
        color=color.reshape(h, w, 3), depth=depth.reshape(h, w),
        normal=normal.reshape(h, w, 3), opacity=opacity.reshape(h, w),
        mesh_depth=m_depth.reshape(h, w), mesh_normal=m_normal.reshape(h, w, 3),
        mesh_mask=(m_tet >= 0).reshape(h, w), generation=scene.generation,
        peak=peak.max(axis=0) if collect_peak else None,
        aux=dict(steps=steps, status=status, normal_len=nlen, m_tet=m_tet,
                 normal_flat=normal, cull=kin["cull"]),
    )
    return out


def backward_render(scene: Scene, camera: Camera, out: RenderOutput, grads: OutputGrads,
                    residual=None) -> GradSet:
    """Adjoint of :func:`render_view`; optionally accumulates per-tet error
    statistics (sum w*r, sum w*r^2, sum w, sum w*d) for the residual map."""
    if out.generation != scene.generation:
        raise GenerationMismatch("render output is from another complex generation")
    kin = _kernel_inputs(scene, camera, out.aux["cull"])
    n = camera.width * camera.height
    want_stats = residual is not None
    res = np.zeros(n) if residual is None else np.asarray(residual, dtype=np.float64).reshape(n)

    def flat(a, c=None):
        return np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape((n, c) if c else n))

    dsdf, dsh, dG, dlogs, stats = K.render_backward(
        kin["origin"], kin["dirs"], kin["cosz"], kin["start_tet"], kin["A"], kin["nbr"],
        kin["nbr_face"], kin["hull"], kin["tets"], kin["sdf"], kin["sh"], kin["degree"],
        kin["G"], kin["O"], kin["tgrad"], kin["tnorm"], kin["s"], kin["bg"], kin["cull"],
        out.aux["steps"], out.aux["status"], out.aux["normal_len"], out.aux["normal_flat"],
        out.aux["m_tet"], flat(grads.color, 3), flat(grads.depth), flat(grads.normal, 3),
        flat(grads.opacity), flat(grads.mesh_depth), flat(grads.mesh_normal, 3), res,
        want_stats)
    return GradSet(
        sdf=dsdf.sum(axis=0), sh=dsh.sum(axis=0), color_grad=dG.sum(axis=0),
        log_s=float(dlogs.sum()), stats=stats.sum(axis=0) if want_stats else None,
    )


def write_png(path, image) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return img


def write_pfm(path, image) -> None:
    """Little-endian portable float map (1 or 3 channels)."""
    img = np.asarray(image, dtype="<f4")
    color = img.ndim == 3 and img.shape[2] == 3
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)
