"""Fit the sphere preset at reduced resolution and report Chamfer/PSNR.

A few minutes on one core.  For the full-size run use
``tetsdf fit --config configs/sphere.cfg``.

    python3 demos/fit_sphere.py [iterations]
"""

import sys
from pathlib import Path

from tetsdf import cli
from tetsdf.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main(iterations: int) -> None:
    step = max(iterations // 6, 1)
    overrides = [
        "width = 64", "height = 64", f"iterations = {iterations}",
        f"densify_every = {step}", f"densify_start = {step}", f"densify_end = {5 * step}",
        f"prune_every = {step}", f"prune_start = {2 * step}", f"prune_end = {5 * step}",
        f"checkpoint_every = {iterations}", "output = out/demo_fit",
    ]
    cfg = load_config(ROOT / "configs" / "sphere.cfg", overrides)
    metrics = cli.fit(cfg)
    for key in ("iterations", "seconds", "tets", "mesh_faces", "chamfer", "psnr"):
        print(f"{key:>12} = {metrics[key]}")
    print(f"artifacts in {cfg.output}/ (loss_log.csv, checkpoint.tsdf, mesh.obj, mesh.ply)")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1200)
