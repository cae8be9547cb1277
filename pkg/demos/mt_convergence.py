"""Marching-tets extraction of an analytic sphere on three grid levels.

Prints Chamfer distance, mesh topology and the convergence factor per
halving of the mean grid edge length.
"""

import math

import numpy as np

from tetsdf import scenes
from tetsdf.geometry import delaunay_tetrahedralize
from tetsdf.mesh import marching_tets

gt = scenes.sphere(r=0.5)
prev = None
for n in (1000, 8000, 64000):
    cx = delaunay_tetrahedralize(scenes.init_points(n_points=n, seed=0))
    mesh = marching_tets(cx, gt(cx.vertices))
    e = cx.edges
    h = float(np.linalg.norm(cx.vertices[e[:, 0]] - cx.vertices[e[:, 1]], axis=1).mean())
    c = scenes.chamfer(mesh, gt)
    line = (f"{n:6d} points  h = {h:.4f}  chamfer = {c:.2e}  "
            f"watertight = {mesh.is_watertight()}  euler = {mesh.euler_characteristic()}")
    if prev:
        line += f"  factor/halving = {(prev[1] / c) ** (math.log(2) / math.log(prev[0] / h)):.2f}"
    print(line)
    prev = (h, c)
