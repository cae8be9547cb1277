"""Command-line front end: ``tetsdf <subcommand> ...``.

Exit codes: 0 success, 1 failed check (gradcheck), 2 configuration error,
3 runtime error, 64 usage error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_USAGE = 64

logger = logging.getLogger("tetsdf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _print_kv(pairs, file=None) -> None:
    for k, v in pairs:
        if isinstance(v, float):
            v = f"{v:.9g}"
        print(f"{k} = {v}", file=file or sys.stdout)


def _set_workers(n: int) -> None:
    import numba

    if n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# --------------------------------------------------------------------------- fit


def _dataset_from_config(cfg):
    from .config import ConfigError
    from . import scenes

    if cfg.dataset:
        path = Path(cfg.dataset)
        if not (path / "cameras.txt").is_file():
            raise ConfigError(f"dataset: no cameras.txt under {str(path)!r}", "dataset")
        return scenes.load_posed(path, normalize=cfg.normalize)
    return scenes.make_dataset(cfg.preset, cfg.width, cfg.height, cfg.background, cfg.light)


def settings_from_config(cfg):
    from .losses import LossWeights
    from .optim import Schedule, TrainSettings

    sch = Schedule(iterations=cfg.iterations, densify_every=cfg.densify_every,
                   densify_start=cfg.densify_start, densify_end=cfg.densify_end,
                   prune_every=cfg.prune_every, prune_start=cfg.prune_start,
                   prune_end=cfg.prune_end, cull_every=cfg.cull_every,
                   checkpoint_every=cfg.checkpoint_every)
    weights = LossWeights(mesh=cfg.lambda_mesh, field=cfg.lambda_field,
                          mesh_depth=cfg.lambda_mesh_depth, mesh_normal=cfg.lambda_mesh_normal,
                          normal_depth=cfg.lambda_normal_depth, eikonal=cfg.lambda_eikonal,
                          curvature=cfg.lambda_curvature, ssim=cfg.lambda_ssim)
    return TrainSettings(schedule=sch, weights=weights, lr_sdf=cfg.lr_sdf,
                         lr_appearance=cfg.lr_appearance, lr_log_s=cfg.lr_log_s,
                         densify_fraction=cfg.densify_fraction, tau_c=cfg.tau_c,
                         densify_surface=cfg.densify_surface, densify_error=cfg.densify_error,
                         prune=cfg.prune, cull=cfg.cull, seed=cfg.seed, max_log_s=cfg.max_log_s)


def scene_from_config(cfg):
    from . import scenes

    b = cfg.bounds
    bounds = (b[:3], b[3:])
    return scenes.init_scene(bounds, cfg.init_points,
                             r0=cfg.init_radius or None, seed=cfg.seed,
                             sh_degree=cfg.sh_degree,
                             log_s=math.log(cfg.init_sharpness) if cfg.init_sharpness else None,
                             background=cfg.background)


def fit(cfg) -> dict:
    """Train from a parsed config; writes all artifacts into ``cfg.output``
    and returns the final metrics."""
    from . import scenes
    from .config import echo_config
    from .optim import train
    from .render import render_view

    _set_workers(cfg.workers)
    out = Path(cfg.output)
    data = _dataset_from_config(cfg)
    scene = scene_from_config(cfg)
    settings = settings_from_config(cfg)
    echo_config(cfg, out)
    (out / "cameras.txt").write_text(scenes.format_cameras(data.names, data.cameras))
    nrm = data.normalization
    (out / "normalization.txt").write_text(
        f"center = {' '.join(repr(float(x)) for x in nrm.center)}\nscale = {nrm.scale!r}\n")
    logger.info("fit: %d views, %d vertices, %d tets, %d iterations", len(data),
                scene.complex.n_vertices, scene.complex.n_tets, cfg.iterations)
    res = train(scene, data.cameras, data.images, settings, out_dir=out)
    metrics = {"iterations": res.iterations, "seconds": res.seconds,
               "final_loss": res.log[-1].total if res.log else float("nan"),
               "vertices": res.scene.complex.n_vertices, "tets": res.scene.complex.n_tets,
               "mesh_vertices": res.mesh.n_vertices, "mesh_faces": res.mesh.n_faces}
    renders = [np.clip(render_view(res.scene, c).color, 0, 1) for c in data.cameras]
    metrics["psnr"] = float(np.mean([scenes.psnr(a, b) for a, b in zip(renders, data.images)]))
    if data.gt is not None and res.mesh.n_faces:
        acc, comp = scenes.chamfer_components(res.mesh, data.gt)
        metrics.update(chamfer=0.5 * (acc + comp), accuracy=acc, completeness=comp)
    with open(out / "metrics.txt", "w") as fh:
        _print_kv(metrics.items(), fh)
    return metrics


def _cmd_fit(args) -> int:
    from .config import load_config

    cfg = load_config(args.config, args.set)
    if args.output:
        cfg.output = args.output
    metrics = fit(cfg)
    _print_kv(metrics.items())
    return EXIT_OK


# --------------------------------------------------------------------------- others


def _cmd_render(args) -> int:
    from .checkpoint import load_checkpoint
    from .render import render_view, write_pfm, write_png
    from .scenes import load_cameras

    ckpt = Path(args.checkpoint)
    scene, _, _ = load_checkpoint(ckpt)
    cam_path = Path(args.cameras) if args.cameras else ckpt.parent / "cameras.txt"
    cams = load_cameras(cam_path)
    if not 0 <= args.camera_index < len(cams):
        raise UsageError(f"render: camera index {args.camera_index} outside 0..{len(cams) - 1}")
    name, cam = cams[args.camera_index]
    out = render_view(scene, cam)
    target = Path(args.out) if args.out else ckpt.parent / f"render_{args.camera_index:03d}.png"
    write_png(target, np.clip(out.color, 0, 1))
    _print_kv([("camera", name), ("image", str(target))])
    if args.depth:
        write_pfm(args.depth, out.depth)
        _print_kv([("depth", args.depth)])
    if args.normal:
        write_png(args.normal, np.where(out.opacity[..., None] > 0, 0.5 * out.normal + 0.5, 0))
        _print_kv([("normal", args.normal)])
    return EXIT_OK


def _cmd_extract(args) -> int:
    from .checkpoint import load_checkpoint
    from .mesh import export_mesh, marching_tets

    scene, _, _ = load_checkpoint(args.checkpoint)
    mesh = marching_tets(scene.complex, scene.sdf)
    path = Path(args.out)
    fmt = args.format or path.suffix.lstrip(".").lower()
    export_mesh(mesh, path, fmt)
    _print_kv([("vertices", mesh.n_vertices), ("faces", mesh.n_faces),
               ("bytes", path.stat().st_size), ("watertight", str(mesh.is_watertight()).lower()),
               ("euler_characteristic", mesh.euler_characteristic())])
    return EXIT_OK


def _cmd_eval(args) -> int:
    from . import scenes
    from .mesh import load_mesh

    mesh = load_mesh(args.mesh)
    if args.gt_mesh:
        reference = load_mesh(args.gt_mesh)
    else:
        if args.gt_sdf not in scenes.PRESETS:
            raise UsageError(f"eval: unknown preset {args.gt_sdf!r}")
        reference = scenes.PRESETS[args.gt_sdf].sdf
    acc, comp = scenes.chamfer_components(mesh, reference, args.samples, args.seed)
    out = [("chamfer", 0.5 * (acc + comp)), ("accuracy", acc), ("completeness", comp),
           ("mesh_vertices", mesh.n_vertices), ("mesh_faces", mesh.n_faces)]
    if args.checkpoint:
        from .checkpoint import load_checkpoint
        from .losses import ssim
        from .render import render_view

        if not args.dataset:
            raise UsageError("eval: --checkpoint needs --dataset")
        scene, _, _ = load_checkpoint(args.checkpoint)
        data = scenes.load_posed(args.dataset, normalize=not args.no_normalize)
        imgs = [np.clip(render_view(scene, c).color, 0, 1) for c in data.cameras]
        out += [("psnr", float(np.mean([scenes.psnr(a, b) for a, b in zip(imgs, data.images)]))),
                ("ssim", float(np.mean([ssim(a, b) for a, b in zip(imgs, data.images)])))]
    _print_kv(out)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, run_suite

    cases = run_suite(args.seed, args.cases)
    print(format_report(cases))
    worst = {}
    for c in cases:
        for b in c.blocks.values():
            worst[b.name] = max(worst.get(b.name, 0.0), b.max_rel)
    _print_kv([(f"max_rel_err_{k}", v) for k, v in worst.items()])
    ok = all(c.ok for c in cases)
    _print_kv([("result", "pass" if ok else "fail")])
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _cmd_make_scene(args) -> int:
    from . import scenes

    if args.preset not in scenes.PRESETS:
        raise UsageError(f"make-scene: unknown preset {args.preset!r} "
                         f"(choose from {', '.join(scenes.PRESETS)})")
    data = scenes.make_dataset(args.preset, args.width, args.height, tuple(args.background))
    scenes.save_posed(data, args.out)
    _print_kv([("views", len(data)), ("directory", args.out)])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tetsdf", description="Signed distance fields on adaptive tetrahedral "
                                           "grids: fitting, rendering and mesh extraction.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv debug)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    f = sub.add_parser("fit", help="optimise a grid against posed images")
    f.add_argument("--config", required=True)
    f.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    f.add_argument("--output", help="output directory (overrides the config)")
    f.set_defaults(func=_cmd_fit)

    r = sub.add_parser("render", help="render one camera from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--camera-index", type=int, required=True)
    r.add_argument("--cameras", help="cameras.txt (default: next to the checkpoint)")
    r.add_argument("--out", help="PNG path")
    r.add_argument("--depth", help="also write z-depth as PFM")
    r.add_argument("--normal", help="also write normals as PNG")
    r.set_defaults(func=_cmd_render)

    e = sub.add_parser("extract", help="marching-tets mesh from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--format", choices=("obj", "ply"))
    e.set_defaults(func=_cmd_extract)

    v = sub.add_parser("eval", help="Chamfer distance (and optionally PSNR/SSIM)")
    v.add_argument("--mesh", required=True)
    g = v.add_mutually_exclusive_group(required=True)
    g.add_argument("--gt-mesh")
    g.add_argument("--gt-sdf", metavar="PRESET")
    v.add_argument("--samples", type=int, default=100_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--checkpoint", help="also report image metrics for this checkpoint")
    v.add_argument("--dataset", help="posed-image directory for the image metrics")
    v.add_argument("--no-normalize", action="store_true")
    v.set_defaults(func=_cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=1)
    c.add_argument("--cases", type=int, default=5)
    c.set_defaults(func=_cmd_gradcheck)

    m = sub.add_parser("make-scene", help="render a preset into a posed-image directory")
    m.add_argument("--preset", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--width", type=int, default=128)
    m.add_argument("--height", type=int, default=128)
    m.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    m.set_defaults(func=_cmd_make_scene)
    return p


def run(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("tetsdf: a subcommand is required (fit, render, extract, eval, "
                             "gradcheck, make-scene)")
    except UsageError as exc:
        print(f"{exc}\n{parser.format_usage()}", file=sys.stderr, end="")
        return EXIT_USAGE
    # numba falls back from an old system TBB to another threading layer; harmless
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        logger.debug("runtime error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
