"""Parameter blocks, Adam, the per-view loss/gradient and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapt
from .field import Scene
from .losses import (FieldStencil, LossReport, LossWeights, build_stencil, loss_field_reg,
                     loss_mesh, loss_nd, loss_rgb, total_loss)
from .mesh import TriangleMesh, export_mesh, marching_tets
from .render import Camera, OutputGrads, RenderOutput, backward_render, render_view

logger = logging.getLogger(__name__)

BLOCKS = ("sdf", "sh", "color_grad", "log_s")


class ShapeMismatch(ValueError):
    pass


class NanLoss(FloatingPointError):
    pass


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------------------- parameters


def scene_params(scene: Scene) -> dict:
    """Views onto the scene's trainable blocks (log_s as a 1-element array)."""
    return {"sdf": scene.sdf, "sh": scene.appearance.sh, "color_grad": scene.appearance.grad,
            "log_s": np.array([scene.log_s])}


def set_scene_params(scene: Scene, params: dict) -> None:
    scene.sdf = params["sdf"]
    scene.appearance.sh = params["sh"]
    scene.appearance.grad = params["color_grad"]
    scene.log_s = float(params["log_s"][0])


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update; ``lr`` is a scalar or a per-block dict.
    Returns new parameter arrays and updates ``state`` in place."""
    for k, p in params.items():
        g = grads[k]
        if np.shape(g) != np.shape(p) or state.m[k].shape != np.shape(p):
            raise ShapeMismatch(f"block {k!r}: param {np.shape(p)}, grad {np.shape(g)}, "
                                f"moments {state.m[k].shape}")
    state.t += 1
    t = state.t
    c1, c2 = 1.0 - beta1**t, 1.0 - beta2**t
    out = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        rate = lr[k] if isinstance(lr, dict) else lr
        out[k] = p - rate * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
    return out


def remap_state(state: AdamState, edit: adapt.SceneEdit) -> AdamState:
    """Carry moments of surviving vertices/tets; fresh elements start at zero."""
    def take(arr, src):
        out = np.zeros((len(src),) + arr.shape[1:])
        ok = src >= 0
        out[ok] = arr[src[ok]]
        return out

    m, v = {}, {}
    for k in state.m:
        if k == "log_s":
            m[k], v[k] = state.m[k], state.v[k]
            continue
        src = edit.vertex_source if k == "sdf" else edit.tet_source
        m[k], v[k] = take(state.m[k], src), take(state.v[k], src)
    return AdamState(m, v, state.t)


# --------------------------------------------------------------------------- schedule


@dataclass
class Schedule:
    iterations: int = 18000
    densify_every: int = 500
    densify_start: int = 2000
    densify_end: int = 16000
    prune_every: int = 500
    prune_start: int = 4000
    prune_end: int = 15000
    cull_every: int = 100
    checkpoint_every: int = 1000

    def __post_init__(self):
        for name in ("densify_every", "prune_every", "cull_every", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for a, b in (("densify_start", "densify_end"), ("prune_start", "prune_end")):
            lo, hi = getattr(self, a), getattr(self, b)
            if not 0 <= lo <= hi <= max(self.iterations, 0) and self.iterations > 0:
                raise ValueError(f"window [{a}, {b}] = [{lo}, {hi}] must lie within "
                                 f"[0, {self.iterations}]")

    def densify_now(self, it: int) -> bool:
        return self.densify_start <= it <= self.densify_end and it % self.densify_every == 0

    def prune_now(self, it: int) -> bool:
        return self.prune_start <= it <= self.prune_end and it % self.prune_every == 0

    def cull_now(self, it: int) -> bool:
        return it % self.cull_every == 0

    def checkpoint_now(self, it: int) -> bool:
        return it % self.checkpoint_every == 0


# --------------------------------------------------------------------------- loss + gradient


@dataclass
class StepResult:
    report: LossReport
    grads: dict
    render: RenderOutput
    parts: dict = field(default_factory=dict)
    raw_stats: np.ndarray | None = None


def loss_and_grad(scene: Scene, camera: Camera, target, weights: LossWeights,
                  stencil: FieldStencil | None = None, cull=None, iteration: int = 0,
                  collect: bool = False, with_grad: bool = True) -> StepResult:
    """Render one view, evaluate the total loss and back-propagate it into
    every parameter block.  Mesh maps come from the first zero crossing along
    each ray, which is exactly the ray cast of the marching-tets mesh."""
    w = weights
    out = render_view(scene, camera, cull, collect_peak=collect)
    r_rgb = loss_rgb(out.color, target, w.ssim, with_grad)
    r_mesh = loss_mesh(out.depth, out.normal, out.mesh_depth, out.mesh_normal, out.mesh_mask,
                       out.opacity, w.mesh_depth, w.mesh_normal, with_grad)
    use_nd = w.field * w.normal_depth > 0
    r_nd = loss_nd(out.depth, out.normal, out.opacity, camera, with_grad) if use_nd else \
        ((0.0, 0.0, 0.0) if with_grad else 0.0)
    use_reg = w.field * (w.eikonal + w.curvature) > 0
    if use_reg:
        r_reg = loss_field_reg(scene.complex, scene.sdf, stencil, with_grad)
    else:
        r_reg = (0.0, 0.0, 0.0, 0.0) if with_grad else (0.0, 0.0)
    val = lambda r: r[0] if with_grad else r  # noqa: E731
    report = total_loss(val(r_rgb), val(r_mesh), val(r_nd), r_reg[0], r_reg[1], w, iteration)
    parts = {"rgb": report.rgb, "mesh": report.mesh, "normal_depth": report.normal_depth,
             "eikonal": report.eikonal, "curvature": report.curvature}
    if not with_grad:
        return StepResult(report, {}, out, parts)

    h, wd = camera.height, camera.width
    g = OutputGrads.zeros(h, wd)
    g.color = r_rgb[1]
    _, gd, gn, gmd, gmn = r_mesh
    g.depth = w.mesh * gd
    g.normal = w.mesh * gn
    g.mesh_depth = w.mesh * gmd
    g.mesh_normal = w.mesh * gmn
    if use_nd:
        g.depth = g.depth + w.field * w.normal_depth * r_nd[1]
        g.normal = g.normal + w.field * w.normal_depth * r_nd[2]
    residual = np.abs(out.color - target).mean(axis=-1) if collect else None
    gs = backward_render(scene, camera, out, g, residual)
    d_sdf = gs.sdf
    if use_reg:
        d_sdf = d_sdf + w.field * (w.eikonal * r_reg[2] + w.curvature * r_reg[3])
    grads = {"sdf": d_sdf, "sh": gs.sh, "color_grad": gs.color_grad,
             "log_s": np.array([gs.log_s])}
    return StepResult(report, grads, out, parts, gs.stats)


# --------------------------------------------------------------------------- training


@dataclass
class TrainSettings:
    schedule: Schedule = field(default_factory=Schedule)
    weights: LossWeights = field(default_factory=LossWeights)
    lr_sdf: float = 1e-3
    lr_appearance: float = 2.5e-3
    lr_log_s: float = 1e-3
    densify_fraction: float = 0.05
    tau_c: float = 0.01
    densify_surface: bool = True
    densify_error: bool = True
    prune: bool = True
    cull: bool = True
    seed: int = 0
    max_log_s: float = 12.0

    def lrs(self) -> dict:
        return {"sdf": self.lr_sdf, "sh": self.lr_appearance,
                "color_grad": self.lr_appearance, "log_s": self.lr_log_s}


@dataclass
class TrainResult:
    scene: Scene
    mesh: TriangleMesh
    log: list
    state: AdamState
    iterations: int
    seconds: float


def view_order(n_views: int, iterations: int, seed: int) -> np.ndarray:
    """Round-robin over views, reshuffled each epoch from a fixed seed."""
    rng = np.random.default_rng(seed)
    epochs = -(-iterations // max(n_views, 1))
    return np.concatenate([rng.permutation(n_views) for _ in range(epochs)] or
                          [np.zeros(0, dtype=np.int64)])[:iterations]


def train(scene: Scene, cameras, images, settings: TrainSettings, out_dir=None,
          on_iteration=None) -> TrainResult:
    """Optimise ``scene`` in place against posed images; returns the final
    scene, its marching-tets mesh and the per-iteration loss reports."""
    if len(cameras) == 0 or len(cameras) != len(images):
        raise DatasetError("need a non-empty, equal number of cameras and images")
    from .checkpoint import save_checkpoint

    sch = settings.schedule
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "loss_log.csv", "w")
        log_fh.write(LossReport.CSV_HEADER + "\n")
    lrs = settings.lrs()
    state = AdamState.zeros_like(scene_params(scene))
    stencil = build_stencil(scene.complex)
    cull = None
    contrib = adapt.ContributionStats.empty(scene.complex)
    errors = adapt.ErrorStats.empty(scene.complex)
    order = view_order(len(cameras), sch.iterations, settings.seed)
    log = []
    t0 = time.perf_counter()
    try:
        for it in range(sch.iterations):
            if settings.cull and sch.cull_now(it):
                cull = adapt.cull_flags(scene.complex, scene.sdf, scene.s)
            v = int(order[it])
            res = loss_and_grad(scene, cameras[v], images[v], settings.weights, stencil, cull,
                                iteration=it, collect=True)
            rep = res.report
            if not all(math.isfinite(x) for x in (rep.total, *res.parts.values())) or \
                    not all(np.all(np.isfinite(g)) for g in res.grads.values()):
                if out_dir is not None:
                    save_checkpoint(out_dir / "diagnostic.tsdf", scene, state, it)
                raise NanLoss(f"non-finite loss or gradient at iteration {it}: {rep}")
            log.append(rep)
            if log_fh is not None:
                log_fh.write(rep.csv_line() + "\n")
            adapt.record_contributions(contrib, res.render.peak)
            errors.add_view(res.raw_stats, cameras[v].center)
            new = adam_step(scene_params(scene), res.grads, state, lrs)
            new["log_s"] = np.minimum(new["log_s"], settings.max_log_s)
            set_scene_params(scene, new)
            if on_iteration is not None:
                on_iteration(it, scene, rep)

            step = it + 1
            edits = []
            if settings.prune and sch.prune_now(step):
                edits.append(adapt.prune(scene, contrib, settings.tau_c))
                scene = edits[-1].scene
                errors = _remap_errors(errors, edits[-1])
            if sch.densify_now(step) and (settings.densify_surface or settings.densify_error):
                edits.append(adapt.densify(scene, errors, settings.densify_fraction,
                                           settings.densify_surface, settings.densify_error))
                scene = edits[-1].scene
            if edits:
                for e in edits:
                    state = remap_state(state, e)
                stencil = build_stencil(scene.complex)
                cull = adapt.cull_flags(scene.complex, scene.sdf, scene.s) if settings.cull \
                    else None
                contrib = adapt.ContributionStats.empty(scene.complex)
                errors = adapt.ErrorStats.empty(scene.complex)
                logger.info("iteration %d: %d vertices, %d tets", step, scene.complex.n_vertices,
                            scene.complex.n_tets)
            if out_dir is not None and sch.checkpoint_now(step):
                save_checkpoint(out_dir / "checkpoint.tsdf", scene, state, step)
    finally:
        if log_fh is not None:
            log_fh.close()
    mesh = marching_tets(scene.complex, scene.sdf)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.tsdf", scene, state, sch.iterations)
        export_mesh(mesh, out_dir / "mesh.obj")
        export_mesh(mesh, out_dir / "mesh.ply")
    return TrainResult(scene, mesh, log, state, sch.iterations, time.perf_counter() - t0)


def _remap_errors(errors: adapt.ErrorStats, edit: adapt.SceneEdit) -> adapt.ErrorStats:
    """Error statistics survive for tets that exist unchanged after an edit."""
    if errors.generation == edit.scene.generation:
        return errors
    new = adapt.ErrorStats.empty(edit.scene.complex, errors.variance_weight)
    ok = edit.tet_source >= 0
    src = edit.tet_source[ok]
    new.score[ok] = errors.score[src]
    new.top_err[ok] = errors.top_err[src]
    new.top_origin[ok] = errors.top_origin[src]
    new.top_dir[ok] = errors.top_dir[src]
    return new
