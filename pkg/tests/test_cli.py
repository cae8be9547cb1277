import os
import subprocess
import sys

import numpy as np
import pytest

from tetsdf import cli
from tetsdf.checkpoint import load_checkpoint
from tetsdf.geometry import delaunay_tetrahedralize
from tetsdf.mesh import export_mesh, load_mesh, marching_tets
from tetsdf.render import read_pfm, read_png
from tetsdf.scenes import init_points

TINY = """# tiny run
preset = sphere
width = 16
height = 16
background = 1 1 1
init_points = 200
iterations = 4
densify_every = 2
densify_start = 2
densify_end = 4
prune_every = 2
prune_start = 2
prune_end = 4
checkpoint_every = 2
seed = 1
"""


def run(capsys, *argv):
    code = cli.run(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def kv(text):
    return dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    d = tmp_path_factory.mktemp("fit")
    (d / "tiny.cfg").write_text(TINY)
    code = cli.run(["fit", "--config", str(d / "tiny.cfg"), "--output", str(d / "out")])
    assert code == 0
    return d / "out"


def test_usage_errors(capsys):
    assert run(capsys)[0] == 64
    assert run(capsys, "frobnicate")[0] == 64
    code, _, err = run(capsys, "fit")
    assert code == 64 and "--config" in err
    assert run(capsys, "make-scene", "--preset", "teapot", "--out", "x")[0] == 64


def test_config_errors(capsys, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("widht = 3\n")
    code, _, err = run(capsys, "fit", "--config", str(bad))
    assert code == 2 and "widht" in err
    code, _, err = run(capsys, "fit", "--config", str(tmp_path / "missing.cfg"))
    assert code == 2
    good = tmp_path / "good.cfg"
    good.write_text(TINY)
    code, _, err = run(capsys, "fit", "--config", str(good), "--set", "iterations=1")
    assert code == 2 and "densify_end" in err


def test_runtime_errors(capsys, tmp_path):
    (tmp_path / "junk.tsdf").write_bytes(b"not a checkpoint")
    code, _, err = run(capsys, "extract", "--checkpoint", str(tmp_path / "junk.tsdf"),
                       "--out", str(tmp_path / "m.obj"))
    assert code == 3 and "error" in err
    code, _, _ = run(capsys, "eval", "--mesh", str(tmp_path / "none.obj"), "--gt-sdf", "sphere")
    assert code == 3


def test_fit_outputs(fitted):
    for name in ("config.txt", "config.resolved.txt", "loss_log.csv", "checkpoint.tsdf",
                 "mesh.obj", "mesh.ply", "metrics.txt", "cameras.txt"):
        assert (fitted / name).is_file(), name
    assert (fitted / "config.txt").read_text() == TINY
    rows = (fitted / "loss_log.csv").read_text().splitlines()
    assert len(rows) == 5
    _, _, it = load_checkpoint(fitted / "checkpoint.tsdf")
    assert it == 4
    m = kv((fitted / "metrics.txt").read_text())
    assert int(m["iterations"]) == 4 and float(m["chamfer"]) > 0


def test_render_subcommand(capsys, fitted, tmp_path):
    code, out, _ = run(capsys, "render", "--checkpoint", str(fitted / "checkpoint.tsdf"),
                       "--camera-index", "3", "--out", str(tmp_path / "r.png"),
                       "--depth", str(tmp_path / "d.pfm"), "--normal", str(tmp_path / "n.png"))
    assert code == 0
    assert read_png(tmp_path / "r.png").shape == (16, 16, 3)
    assert read_pfm(tmp_path / "d.pfm").shape == (16, 16)
    assert (tmp_path / "n.png").is_file()
    code, _, _ = run(capsys, "render", "--checkpoint", str(fitted / "checkpoint.tsdf"),
                     "--camera-index", "99")
    assert code == 64


def test_extract_subcommand(capsys, fitted, tmp_path):
    for fmt in ("obj", "ply"):
        target = tmp_path / f"m.{fmt}"
        code, out, _ = run(capsys, "extract", "--checkpoint", str(fitted / "checkpoint.tsdf"),
                           "--out", str(target))
        assert code == 0
        stats = kv(out)
        mesh = load_mesh(target)
        assert int(stats["faces"]) == mesh.n_faces
        assert int(stats["bytes"]) == target.stat().st_size


def test_eval_dense_sphere(capsys, tmp_path):
    cx = delaunay_tetrahedralize(init_points(n_points=30000, seed=5))
    export_mesh(marching_tets(cx, np.linalg.norm(cx.vertices, axis=1) - 0.5), tmp_path / "s.obj")
    code, out, _ = run(capsys, "eval", "--mesh", str(tmp_path / "s.obj"), "--gt-sdf", "sphere",
                       "--samples", "5000")
    assert code == 0
    assert float(kv(out)["chamfer"]) < 2e-3
    code, out, _ = run(capsys, "eval", "--mesh", str(tmp_path / "s.obj"),
                       "--gt-mesh", str(tmp_path / "s.obj"), "--samples", "2000")
    assert code == 0 and float(kv(out)["chamfer"]) < 1e-6


def test_make_scene_and_fit_from_directory(capsys, tmp_path):
    code, out, _ = run(capsys, "make-scene", "--preset", "box", "--out", str(tmp_path / "d"),
                       "--width", "12", "--height", "10")
    assert code == 0 and kv(out)["views"] == "24"
    assert (tmp_path / "d" / "cameras.txt").is_file()
    assert read_png(tmp_path / "d" / "view_000.png").shape == (10, 12, 3)
    cfg = tmp_path / "d.cfg"
    cfg.write_text(TINY.replace("preset = sphere", f"dataset = {tmp_path / 'd'}")
                   .replace("iterations = 4", "iterations = 2")
                   .replace("densify_end = 4", "densify_end = 2")
                   .replace("prune_end = 4", "prune_end = 2"))
    code, out, _ = run(capsys, "fit", "--config", str(cfg), "--output", str(tmp_path / "o"))
    assert code == 0 and "chamfer" not in kv(out)  # no analytic reference for a directory


def test_gradcheck_subcommand(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "2", "--cases", "1")
    assert code == 0 and kv(out)["result"] == "pass"


def test_console_entry_point(tmp_path):
    env = dict(os.environ, PYTHONWARNINGS="ignore")
    proc = subprocess.run([sys.executable, "-m", "tetsdf", "make-scene", "--preset", "sphere",
                           "--out", str(tmp_path / "s"), "--width", "4", "--height", "4"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "tetsdf"], capture_output=True, text=True,
                          env=env)
    assert proc.returncode == 64
