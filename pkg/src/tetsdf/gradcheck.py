"""Finite-difference check of the full training loss gradient.

Small random scenes (a few dozen vertices, one 8x8 view) are built from a
seed; every SDF value, appearance coefficient and log_s is perturbed by
+-h and the central difference of the total loss is compared with the
analytic gradient.  Perturbations that flip a discrete decision of the
forward pass (zero-crossing signs, validity masks, absolute-value kinks)
are not differentiable there and are skipped and counted.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .field import SH_C0, Appearance, Scene, softplus_inv
from .geometry import delaunay_tetrahedralize
from .losses import (VALID_OPACITY, LossWeights, build_stencil, loss_field_reg, loss_mesh,
                     loss_nd, loss_rgb)
from .optim import BLOCKS, loss_and_grad, scene_params, set_scene_params
from .render import T_MIN, render_view
from .scenes import look_at

logger = logging.getLogger(__name__)

STEP = 1e-5
REL_TOL = 1e-4
GRAD_FLOOR = 1e-8


@dataclass
class BlockReport:
    name: str
    checked: int = 0
    skipped: int = 0
    small: int = 0  # |grad| <= floor: only the FD magnitude is checked
    max_rel: float = 0.0
    worst: int = -1
    failures: list = field(default_factory=list)


@dataclass
class CaseReport:
    seed: int
    n_tets: int
    blocks: dict
    seconds: float

    @property
    def ok(self) -> bool:
        return all(not b.failures for b in self.blocks.values())


def make_case(seed: int, n_points: int = 30, size: int = 8):
    """A random scene, camera and target image with well-conditioned
    discrete state: no vertex near the zero level set, colours far from
    the clamp at zero, and no pixel close to early termination."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
        pts = np.vstack([corners, rng.uniform(-0.9, 0.9, (n_points - 8, 3))])
        cx = delaunay_tetrahedralize(pts)
        if cx.n_tets > 200:
            continue
        center = rng.uniform(-0.2, 0.2, 3)
        sdf = np.linalg.norm(cx.vertices - center, axis=1) - rng.uniform(0.4, 0.7)
        sdf += rng.normal(0.0, 0.05, len(sdf))
        if np.min(np.abs(sdf)) < 1e-3:
            continue
        degree = seed % 2
        nb = (degree + 1) ** 2
        sh = np.zeros((cx.n_tets, 3, nb))
        sh[:, :, 0] = softplus_inv(rng.uniform(0.4, 0.8, (cx.n_tets, 3))) / SH_C0
        sh[:, :, 1:] = rng.normal(0.0, 0.1, (cx.n_tets, 3, nb - 1))
        grad = rng.normal(0.0, 0.05, (cx.n_tets, 3, 3))
        scene = Scene(cx, sdf, Appearance(sh, grad, degree), math.log(rng.uniform(3.0, 6.0)),
                      tuple(rng.uniform(0.0, 1.0, 3)))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        f = 0.5 * size / math.tan(math.radians(25.0))
        cam = look_at(3.0 * direction, (0.0, 0.0, 0.0), f, f, size / 2, size / 2, size, size)
        target = rng.uniform(0.0, 1.0, (size, size, 3))
        out = render_view(scene, cam)
        if np.max(out.opacity) > 1.0 - 10 * T_MIN or not np.any(out.mesh_mask):
            continue
        return scene, cam, target
    raise RuntimeError(f"could not draw a well-conditioned case for seed {seed}")


def loss_terms(scene, camera, target, weights: LossWeights, stencil):
    """Per-element contributions whose sum is the total training loss.
    Differencing these element-wise before summing keeps the rounding of the
    O(1) total out of the finite difference."""
    w = weights
    out = render_view(scene, camera)
    eik, curv = loss_field_reg(scene.complex, scene.sdf, stencil, terms=True)
    parts = [
        loss_rgb(out.color, target, w.ssim, terms=True),
        w.mesh * loss_mesh(out.depth, out.normal, out.mesh_depth, out.mesh_normal,
                           out.mesh_mask, out.opacity, w.mesh_depth, w.mesh_normal, terms=True),
        w.field * w.normal_depth * loss_nd(out.depth, out.normal, out.opacity, camera,
                                           terms=True),
        w.field * w.eikonal * eik,
        w.field * w.curvature * curv,
    ]
    return np.concatenate(parts), out


def _signature(out, target, lap_sign):
    op = out.opacity
    return (
        out.mesh_mask.tobytes(),
        (op > VALID_OPACITY).tobytes(),
        (op > 1.0 - T_MIN).tobytes(),
        np.sign(out.color - target).tobytes(),
        np.sign(np.where(out.mesh_mask, out.depth - out.mesh_depth, 0.0)).tobytes(),
        lap_sign,
    )


def _lap_sign(scene, stencil):
    # the curvature term is |laplacian|; its kink is a discrete decision too
    f = scene.sdf
    lap = sum(p @ f - 2 * f[stencil.vertices] + m @ f for p, m in zip(stencil.plus, stencil.minus))
    return np.sign(lap).tobytes()


def check_case(seed: int, step: float = STEP, rel_tol: float = REL_TOL,
               floor: float = GRAD_FLOOR, weights: LossWeights | None = None) -> CaseReport:
    t0 = time.perf_counter()
    weights = weights or LossWeights()
    scene, cam, target = make_case(seed)
    stencil = build_stencil(scene.complex)

    def evaluate(params):
        set_scene_params(scene, params)
        t, out = loss_terms(scene, cam, target, weights, stencil)
        return t, _signature(out, target, _lap_sign(scene, stencil))

    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in scene_params(scene).items()}
    set_scene_params(scene, base)
    res = loss_and_grad(scene, cam, target, weights, stencil)
    analytic = {k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in res.grads.items()}
    terms0, sig0 = evaluate(base)
    if not math.isclose(math.fsum(terms0), res.report.total, rel_tol=1e-12, abs_tol=1e-15):
        raise AssertionError("loss terms do not sum to the reported total")

    reports = {}
    for name in BLOCKS:
        rep = BlockReport(name)
        flat = base[name].reshape(-1)
        for i in range(flat.size):
            vals = []
            skip = False
            for sign in (1.0, -1.0):
                trial = {k: v.copy() for k, v in base.items()}
                trial[name].reshape(-1)[i] = flat[i] + sign * step
                terms, sig = evaluate(trial)
                if sig != sig0:
                    skip = True
                    break
                vals.append(terms)
            if skip:
                rep.skipped += 1
                continue
            fd = math.fsum(vals[0] - vals[1]) / (2.0 * step)
            a = analytic[name][i]
            if abs(a) <= floor:
                rep.small += 1
                if abs(fd) > 100 * floor:
                    rep.failures.append((i, a, fd))
                continue
            rep.checked += 1
            rel = abs(a - fd) / max(abs(a), abs(fd))
            if rel > rep.max_rel:
                rep.max_rel, rep.worst = rel, i
            if rel >= rel_tol:
                rep.failures.append((i, a, fd))
        reports[name] = rep
    set_scene_params(scene, base)
    return CaseReport(seed, scene.complex.n_tets, reports, time.perf_counter() - t0)


def run_suite(seed: int = 1, n_cases: int = 5, **kwargs) -> list[CaseReport]:
    """``n_cases`` scenes with seeds ``seed, seed + 1, ...``."""
    return [check_case(seed + k, **kwargs) for k in range(n_cases)]


def format_report(cases: list[CaseReport]) -> str:
    lines = []
    for c in cases:
        lines.append(f"scene seed {c.seed}: {c.n_tets} tets, {c.seconds:.1f} s, "
                     f"{'ok' if c.ok else 'FAILED'}")
        for b in c.blocks.values():
            lines.append(f"  {b.name:<10} checked {b.checked:5d}  small {b.small:5d}  "
                         f"skipped {b.skipped:3d}  max rel err {b.max_rel:.3e}")
            for i, a, fd in b.failures[:5]:
                lines.append(f"    element {i}: analytic {a:.9e}  finite-diff {fd:.9e}")
    return "\n".join(lines)
