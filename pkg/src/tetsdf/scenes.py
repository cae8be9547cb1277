"""Analytic test scenes, reference renderings, camera rigs, grid initialisation,
posed-image datasets and reconstruction metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

from .field import Appearance, Scene, sharpness_for_band
from .geometry import delaunay_tetrahedralize
from .losses import ssim
from .mesh import TriangleMesh, marching_tets
from .render import Camera, read_png, write_png

logger = logging.getLogger(__name__)

TRACE_STEPS = 256
HIT_TOL = 1e-6
DEFAULT_LIGHT = (0.4, -0.3, 0.85)
DEFAULT_BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


class DegenerateLookAt(ValueError):
    pass


class ParseError(ValueError):
    pass


class MissingImage(FileNotFoundError):
    pass


class EmptyMesh(ValueError):
    pass


# --------------------------------------------------------------------------- analytic SDFs


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" | "box" | "torus"
    center: tuple
    size: tuple  # sphere (r,), box half extents, torus (R, r) around the z axis
    albedo: tuple = (0.8, 0.8, 0.8)

    def distance(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            d = np.abs(q) - np.asarray(self.size, dtype=np.float64)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            return outside + np.minimum(np.max(d, axis=-1), 0.0)
        if self.kind == "torus":
            ring = np.hypot(q[..., 0], q[..., 1]) - self.size[0]
            return np.hypot(ring, q[..., 2]) - self.size[1]
        raise ValueError(f"unknown primitive {self.kind!r}")


@dataclass(frozen=True)
class AnalyticSdf:
    """Min-union of primitives.  Exact for one primitive; a lower bound on the
    true distance near union seams."""

    primitives: tuple

    def __call__(self, p) -> np.ndarray:
        return analytic_eval(self, p)

    def parts(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.stack([prim.distance(p) for prim in self.primitives], axis=-1)

    def albedo(self, p) -> np.ndarray:
        idx = np.argmin(self.parts(p), axis=-1)
        table = np.array([prim.albedo for prim in self.primitives], dtype=np.float64)
        return table[idx]

    def gradient(self, p, h: float = 1e-6) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        g = np.zeros(p.shape)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            g[..., a] = (analytic_eval(self, p + e) - analytic_eval(self, p - e)) / (2 * h)
        return g


def sphere(center=(0, 0, 0), r=0.5, albedo=(0.8, 0.8, 0.8)) -> AnalyticSdf:
    return AnalyticSdf((Primitive("sphere", tuple(center), (float(r),), tuple(albedo)),))


def box(center=(0, 0, 0), half=(0.5, 0.5, 0.5), albedo=(0.8, 0.8, 0.8)) -> AnalyticSdf:
    return AnalyticSdf((Primitive("box", tuple(center), tuple(map(float, half)), tuple(albedo)),))


def torus(center=(0, 0, 0), R=0.5, r=0.2, albedo=(0.8, 0.8, 0.8)) -> AnalyticSdf:
    return AnalyticSdf((Primitive("torus", tuple(center), (float(R), float(r)), tuple(albedo)),))


def union(*sdfs: AnalyticSdf) -> AnalyticSdf:
    return AnalyticSdf(tuple(p for s in sdfs for p in s.primitives))


def analytic_eval(sdf: AnalyticSdf, p) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    d = np.min(sdf.parts(p), axis=-1)
    return float(d) if d.ndim == 0 else d


# --------------------------------------------------------------------------- reference rendering


@dataclass
class ReferenceRender:
    image: np.ndarray
    depth: np.ndarray  # ray distance to the hit, 0 on misses
    mask: np.ndarray


def render_reference(sdf: AnalyticSdf, camera: Camera, light=DEFAULT_LIGHT,
                     background=(0.0, 0.0, 0.0), t_max: float = 100.0) -> ReferenceRender:
    """Sphere-traced image with albedo * max(0.2, n.l) shading."""
    origin, dirs, _ = camera.rays()
    n = len(dirs)
    t = np.zeros(n)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(TRACE_STEPS):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        d = analytic_eval(sdf, origin + t[idx, None] * dirs[idx])
        done = np.abs(d) < HIT_TOL
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, d)
        escaped = t[idx] > t_max
        active[idx[done | escaped]] = False
    pts = origin + t[:, None] * dirs
    if np.any(active):  # out of steps: accept only converged rays
        idx = np.nonzero(active)[0]
        hit[idx] = np.abs(analytic_eval(sdf, pts[idx])) < 1e-5
    light = np.asarray(light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    img = np.tile(np.asarray(background, dtype=np.float64), (n, 1))
    if np.any(hit):
        g = sdf.gradient(pts[hit])
        nrm = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        shade = np.maximum(0.2, nrm @ light)
        img[hit] = sdf.albedo(pts[hit]) * shade[:, None]
    h, w = camera.height, camera.width
    depth = np.where(hit, t, 0.0)
    return ReferenceRender(img.reshape(h, w, 3), depth.reshape(h, w), hit.reshape(h, w))


# --------------------------------------------------------------------------- cameras


def look_at(position, target, fx, fy, cx, cy, width, height, up=(0.0, 0.0, 1.0)) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    dist = np.linalg.norm(fwd)
    if dist < 1e-12:
        raise DegenerateLookAt("camera position coincides with its target")
    fwd /= dist
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:  # looking straight up or down
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return Camera(fx, fy, cx, cy, width, height, np.hstack([rot, (-rot @ position)[:, None]]))


def camera_rig(n: int, radius: float, elevation_deg: float, lookat=(0.0, 0.0, 0.0),
               width: int = 128, height: int = 128, fov_deg: float = 40.0,
               azimuth_offset_deg: float = 0.0) -> list[Camera]:
    """``n`` cameras equally spaced in azimuth on a ring, all aimed at ``lookat``."""
    if n < 1:
        raise ValueError("camera count must be >= 1")
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    el = math.radians(elevation_deg)
    target = np.asarray(lookat, dtype=np.float64)
    cams = []
    for i in range(n):
        az = math.radians(azimuth_offset_deg + 360.0 * i / n)
        pos = target + radius * np.array([math.cos(el) * math.cos(az),
                                          math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(look_at(pos, target, f, f, width / 2, height / 2, width, height))
    return cams


# --------------------------------------------------------------------------- initialisation


def init_points(bounds=DEFAULT_BOUNDS, n_points: int = 2000, seed: int = 0) -> np.ndarray:
    """Box corners plus stratified jittered interior samples."""
    if n_points < 12:
        raise ValueError("need at least 12 points")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    rng = np.random.default_rng(seed)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                        for z in (lo[2], hi[2])])
    n_int = n_points - 8
    k = int(math.ceil(n_int ** (1 / 3)))
    ijk = np.stack(np.meshgrid(*[np.arange(k)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    cells = ijk[np.sort(rng.choice(len(ijk), n_int, replace=False))]
    u = (cells + 0.1 + 0.8 * rng.random((n_int, 3))) / k
    return np.vstack([corners, lo + u * (hi - lo)])


def init_scene(bounds=DEFAULT_BOUNDS, n_points: int = 2000, r0: float | None = None,
               center=None, seed: int = 0, sh_degree: int = 0, log_s: float | None = None,
               background=(0.0, 0.0, 0.0)) -> Scene:
    """Delaunay grid with a sphere SDF (default radius 0.3 x box diagonal) and
    mid-gray appearance."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    diag = float(np.linalg.norm(hi - lo))
    r0 = 0.3 * diag if r0 is None else float(r0)
    center = 0.5 * (lo + hi) if center is None else np.asarray(center, dtype=np.float64)
    pts = init_points(bounds, n_points, seed)
    cx = delaunay_tetrahedralize(pts)
    sdf = np.linalg.norm(cx.vertices - center, axis=1) - r0
    if log_s is None:
        log_s = math.log(sharpness_for_band(0.25 * diag))
    app = Appearance.constant(cx.n_tets, (0.5, 0.5, 0.5), sh_degree)
    return Scene(cx, sdf, app, float(log_s), tuple(background))


# --------------------------------------------------------------------------- presets


@dataclass(frozen=True)
class Preset:
    name: str
    sdf: AnalyticSdf
    rings: tuple = ((12, 35.0), (12, -35.0))  # (count, elevation) per ring
    radius: float = 2.6
    fov_deg: float = 40.0


PRESETS = {
    "sphere": Preset("sphere", sphere((0, 0, 0), 0.5, (0.85, 0.55, 0.35))),
    "box": Preset("box", box((0, 0, 0), (0.4, 0.4, 0.4), (0.35, 0.6, 0.85))),
    "torus": Preset("torus", torus((0, 0, 0), 0.5, 0.2, (0.6, 0.8, 0.4))),
    "sphere_box": Preset("sphere_box", union(sphere((-0.25, 0, 0), 0.4, (0.85, 0.55, 0.35)),
                                             box((0.35, 0, 0), (0.25, 0.25, 0.25),
                                                 (0.35, 0.6, 0.85)))),
}


def preset_cameras(preset: Preset, width: int = 128, height: int = 128) -> list[Camera]:
    cams = []
    for i, (count, elev) in enumerate(preset.rings):
        cams += camera_rig(count, preset.radius, elev, (0, 0, 0), width, height, preset.fov_deg,
                           azimuth_offset_deg=i * 180.0 / max(count, 1))
    return cams


@dataclass
class Normalization:
    """x_normalized = (x - center) * scale."""

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def to_original(self, p) -> np.ndarray:
        return np.asarray(p) / self.scale + self.center

    def to_normalized(self, p) -> np.ndarray:
        return (np.asarray(p) - self.center) * self.scale


@dataclass
class Dataset:
    cameras: list
    images: list
    names: list = field(default_factory=list)
    gt: AnalyticSdf | None = None
    normalization: Normalization = field(default_factory=Normalization)

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("camera and image counts differ")
        if not self.names:
            self.names = [f"view_{i:03d}.png" for i in range(len(self.cameras))]
        for cam, img in zip(self.cameras, self.images):
            if img.shape[:2] != (cam.height, cam.width):
                raise ValueError("image size does not match its camera")

    def __len__(self) -> int:
        return len(self.cameras)


def make_dataset(preset: str | Preset, width: int = 128, height: int = 128,
                 background=(0.0, 0.0, 0.0), light=DEFAULT_LIGHT) -> Dataset:
    p = PRESETS[preset] if isinstance(preset, str) else preset
    cams = preset_cameras(p, width, height)
    imgs = [render_reference(p.sdf, c, light, background).image for c in cams]
    return Dataset(cams, imgs, gt=p.sdf)


# --------------------------------------------------------------------------- cameras.txt


def format_cameras(names, cameras) -> str:
    lines = []
    for name, cam in zip(names, cameras):
        r, t = cam.rotation, cam.translation
        lines += [f"name {name}", f"size {cam.width} {cam.height}",
                  "K " + " ".join(repr(float(x)) for x in (cam.fx, cam.fy, cam.cx, cam.cy)),
                  "R " + " ".join(repr(float(x)) for x in r.ravel()),
                  "t " + " ".join(repr(float(x)) for x in t), ""]
    return "\n".join(lines)


def save_posed(dataset: Dataset, directory) -> None:
    """PNG per view plus ``cameras.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, img in zip(dataset.names, dataset.images):
        write_png(d / name, img)
    (d / "cameras.txt").write_text(format_cameras(dataset.names, dataset.cameras))


def load_cameras(path):
    """[(name, Camera)] from a ``cameras.txt`` file."""
    p = Path(path)
    if not p.is_file():
        raise MissingImage(f"{p} not found")
    return parse_cameras(p.read_text(), str(p))


_FIELDS = (("name", 1), ("size", 2), ("K", 4), ("R", 9), ("t", 3))


def parse_cameras(text: str, source: str = "cameras.txt"):
    """Returns [(name, Camera)] from 5-line blocks; blank lines and # comments ignored."""
    rows = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append((no, line.split()))
    if len(rows) % 5:
        raise ParseError(f"{source}: {len(rows)} non-empty lines is not a multiple of 5")
    out = []
    for b in range(0, len(rows), 5):
        vals = {}
        for (no, tok), (key, count) in zip(rows[b:b + 5], _FIELDS):
            if tok[0] != key or len(tok) != count + 1:
                raise ParseError(f"{source}:{no}: expected '{key}' with {count} values, "
                                 f"got {' '.join(tok)!r}")
            if key == "name":
                vals[key] = tok[1]
                continue
            try:
                vals[key] = [int(x) for x in tok[1:]] if key == "size" else \
                    [float(x) for x in tok[1:]]
            except ValueError as exc:
                raise ParseError(f"{source}:{no}: bad number in '{key}' line: {exc}") from None
        w, h = vals["size"]
        fx, fy, cx, cy = vals["K"]
        ext = np.hstack([np.reshape(vals["R"], (3, 3)), np.reshape(vals["t"], (3, 1))])
        try:
            cam = Camera(fx, fy, cx, cy, w, h, ext)
        except ValueError as exc:
            raise ParseError(f"{source}:{rows[b][0]}: {exc}") from None
        out.append((vals["name"], cam))
    return out


def _normalize_cameras(cams: list[Camera]):
    centers = np.array([c.center for c in cams])
    lo, hi = centers.min(axis=0), centers.max(axis=0)
    half = 0.5 * float(np.max(hi - lo))
    norm = Normalization(0.5 * (lo + hi), 1.0 / half if half > 1e-12 else 1.0)
    out = []
    for c in cams:
        t = norm.scale * (c.rotation @ norm.center + c.translation)
        out.append(Camera(c.fx, c.fy, c.cx, c.cy, c.width, c.height,
                          np.hstack([c.rotation, t[:, None]])))
    return out, norm


def load_posed(directory, normalize: bool = True) -> Dataset:
    d = Path(directory)
    path = d / "cameras.txt"
    if not path.is_file():
        raise MissingImage(f"{path} not found")
    entries = parse_cameras(path.read_text(), str(path))
    images = []
    for name, cam in entries:
        img_path = d / name
        if not img_path.is_file():
            raise MissingImage(f"image {img_path} listed in cameras.txt is missing")
        img = read_png(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise ParseError(f"{img_path}: size {img.shape[1]}x{img.shape[0]} does not match "
                             f"camera size {cam.width}x{cam.height}")
        images.append(img)
    cams = [c for _, c in entries]
    norm = Normalization()
    if normalize and cams:
        cams, norm = _normalize_cameras(cams)
    return Dataset(cams, images, [n for n, _ in entries], None, norm)


# --------------------------------------------------------------------------- metrics


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh."""
    if mesh.n_faces == 0:
        raise EmptyMesh("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    area = mesh.face_areas()
    face = rng.choice(mesh.n_faces, size=n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    p = mesh.positions[mesh.faces[face]]
    return p[:, 0] + u[:, None] * (p[:, 1] - p[:, 0]) + v[:, None] * (p[:, 2] - p[:, 0])


@njit(cache=True)
def _point_triangle_sq(p, a, b, c):
    """Squared distance from p to triangle abc (closest-feature case analysis)."""
    ab0, ab1, ab2 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    ac0, ac1, ac2 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    ap0, ap1, ap2 = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0 and d2 <= 0:
        v, w = 0.0, 0.0
    else:
        bp0, bp1, bp2 = p[0] - b[0], p[1] - b[1], p[2] - b[2]
        d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
        d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
        cp0, cp1, cp2 = p[0] - c[0], p[1] - c[1], p[2] - c[2]
        d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
        d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if d3 >= 0 and d4 <= d3:
            v, w = 1.0, 0.0
        elif d6 >= 0 and d5 <= d6:
            v, w = 0.0, 1.0
        elif vc <= 0 and d1 >= 0 and d3 <= 0:
            v, w = d1 / (d1 - d3), 0.0
        elif vb <= 0 and d2 >= 0 and d6 <= 0:
            v, w = 0.0, d2 / (d2 - d6)
        elif va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            v = 1.0 - w
        else:
            den = 1.0 / (va + vb + vc)
            v, w = vb * den, vc * den
    q0 = a[0] + v * ab0 + w * ac0 - p[0]
    q1 = a[1] + v * ab1 + w * ac1 - p[1]
    q2 = a[2] + v * ab2 + w * ac2 - p[2]
    return q0 * q0 + q1 * q1 + q2 * q2


@njit(cache=True, parallel=True)
def _min_dist(points, cand, tri):
    out = np.empty(points.shape[0])
    for i in prange(points.shape[0]):
        best = 1e300
        for j in range(cand.shape[1]):
            f = cand[i, j]
            d = _point_triangle_sq(points[i], tri[f, 0], tri[f, 1], tri[f, 2])
            if d < best:
                best = d
        out[i] = math.sqrt(best)
    return out


def point_mesh_distance(points, mesh: TriangleMesh, candidates: int = 32) -> np.ndarray:
    """Distance to the nearest of the ``candidates`` triangles whose centroids
    are closest to each point."""
    if mesh.n_faces == 0:
        raise EmptyMesh("distance to an empty mesh")
    tri = np.ascontiguousarray(mesh.positions[mesh.faces])
    k = min(candidates, mesh.n_faces)
    _, cand = cKDTree(tri.mean(axis=1)).query(points, k=k)
    cand = np.ascontiguousarray(np.asarray(cand, dtype=np.int64).reshape(len(points), k))
    return _min_dist(np.ascontiguousarray(points, dtype=np.float64), cand, tri)


def chamfer_points(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptyMesh("chamfer distance needs non-empty point sets")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(da.mean()) + float(db.mean()))


def analytic_surface_samples(sdf: AnalyticSdf, n: int, bounds=DEFAULT_BOUNDS,
                             n_grid: int = 60000, seed: int = 0) -> np.ndarray:
    """Samples on the analytic surface: a dense marching-tets mesh of the
    field, sampled by area and projected onto the zero set by Newton steps."""
    pts = init_points(bounds, n_grid, seed + 1)
    cx = delaunay_tetrahedralize(pts)
    mesh = marching_tets(cx, analytic_eval(sdf, cx.vertices))
    p = sample_surface(mesh, n, seed)
    for _ in range(5):
        g = sdf.gradient(p)
        p = p - analytic_eval(sdf, p)[:, None] * g / np.maximum(
            np.sum(g * g, axis=1, keepdims=True), 1e-300)
    return p


def chamfer(mesh: TriangleMesh, reference, n: int = 100_000, seed: int = 0,
            bounds=DEFAULT_BOUNDS) -> float:
    """Mean of accuracy (mesh -> reference) and completeness (reference -> mesh)."""
    return 0.5 * sum(chamfer_components(mesh, reference, n, seed, bounds))


def chamfer_components(mesh: TriangleMesh, reference, n: int = 100_000, seed: int = 0,
                       bounds=DEFAULT_BOUNDS) -> tuple[float, float]:
    """(accuracy, completeness): mean distances mesh -> reference and back.
    ``reference`` is an AnalyticSdf or a TriangleMesh."""
    pa = sample_surface(mesh, n, seed)
    if isinstance(reference, AnalyticSdf):
        acc = np.abs(analytic_eval(reference, pa))
        pb = analytic_surface_samples(reference, n, bounds, seed=seed + 7)
    else:
        acc = point_mesh_distance(pa, reference)
        pb = sample_surface(reference, n, seed + 7)
    comp = point_mesh_distance(pb, mesh)
    return float(acc.mean()), float(comp.mean())


def psnr(image, reference) -> float:
    mse = float(np.mean((np.asarray(image, dtype=np.float64) - reference) ** 2))
    return float("inf") if mse == 0 else -10.0 * math.log10(mse)


@dataclass
class Metrics:
    chamfer: float
    psnr: float | None = None
    ssim: float | None = None


def eval_metrics(mesh: TriangleMesh, reference, images=None, targets=None, n: int = 100_000,
                 seed: int = 0) -> Metrics:
    cd = chamfer(mesh, reference, n, seed)
    if images is None:
        return Metrics(cd)
    ps = [psnr(np.clip(a, 0, 1), b) for a, b in zip(images, targets)]
    ss = [ssim(np.clip(a, 0, 1), b) for a, b in zip(images, targets)]
    return Metrics(cd, float(np.mean(ps)), float(np.mean(ss)))
