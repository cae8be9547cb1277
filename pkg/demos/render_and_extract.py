"""Build an initial grid, render it from one preset camera and extract its mesh.

    python3 demos/render_and_extract.py [out_dir]
"""

import math
import sys
from pathlib import Path

import numpy as np

from tetsdf import scenes
from tetsdf.mesh import export_mesh, marching_tets
from tetsdf.render import render_view, write_pfm, write_png


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    scene = scenes.init_scene(n_points=3000, r0=0.5, seed=0, log_s=math.log(60.0),
                              background=(1.0, 1.0, 1.0))
    cam = scenes.preset_cameras(scenes.PRESETS["sphere"], 128, 128)[0]
    img = render_view(scene, cam)
    write_png(out / "color.png", np.clip(img.color, 0, 1))
    write_png(out / "normal.png", np.where(img.opacity[..., None] > 0, 0.5 * img.normal + 0.5, 0))
    write_pfm(out / "depth.pfm", img.depth)
    mesh = marching_tets(scene.complex, scene.sdf)
    export_mesh(mesh, out / "init.obj")
    gt = scenes.sphere(r=0.5)
    print(f"{scene.complex.n_vertices} vertices, {scene.complex.n_tets} tets")
    print(f"mesh: {mesh.n_faces} faces, watertight {mesh.is_watertight()}, "
          f"euler {mesh.euler_characteristic()}")
    print(f"chamfer to the r = 0.5 sphere: {scenes.chamfer(mesh, gt, n=20000):.5f}")
    print(f"max opacity {img.opacity.max():.4f}; files in {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "out/demo_render"))
