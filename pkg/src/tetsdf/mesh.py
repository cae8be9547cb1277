"""Marching tetrahedra on the grid SDF, mesh depth/normal maps and mesh I/O."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels as K
from .geometry import TetComplex

logger = logging.getLogger(__name__)

ZERO_SHIFT = 1e-10
LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


class SameSign(ValueError):
    pass


class IoFailure(OSError):
    pass


@dataclass
class TriangleMesh:
    """Triangle soup with shared vertices; ``edges[v]`` is the grid edge (i, j)
    whose zero crossing produced mesh vertex v and ``edge_sdf[v]`` the SDF pair."""

    positions: np.ndarray
    faces: np.ndarray
    edges: np.ndarray | None = None
    edge_sdf: np.ndarray | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_normals(self, unit: bool = True) -> np.ndarray:
        p = self.positions[self.faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        if unit:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def unique_edges(self):
        e = self.faces[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
        return np.unique(np.sort(e, axis=1), axis=0, return_counts=True)

    def euler_characteristic(self) -> int:
        edges, _ = self.unique_edges()
        used = len(np.unique(self.faces))
        return used - len(edges) + self.n_faces

    def is_watertight(self) -> bool:
        _, counts = self.unique_edges()
        return self.n_faces > 0 and bool(np.all(counts == 2))


def mt_vertex(f_i, f_j, v_i, v_j) -> np.ndarray:
    """Zero of the linear interpolant on edge (v_i, v_j)."""
    if not f_i * f_j < 0:
        raise SameSign(f"SDF values {f_i} and {f_j} do not change sign")
    v_i = np.asarray(v_i, dtype=np.float64)
    v_j = np.asarray(v_j, dtype=np.float64)
    return (f_i * v_j - f_j * v_i) / (f_i - f_j)


def _shifted(sdf):
    f = np.asarray(sdf, dtype=np.float64).copy()
    f[f == 0.0] = ZERO_SHIFT
    return f


def marching_tets(complex_: TetComplex, sdf) -> TriangleMesh:
    """Extract the zero level set: one triangle per 1-vs-3 sign split, two per
    2-vs-2 split.  Grid edges are shared between tets, so mesh vertices are too."""
    f = _shifted(sdf)
    tets = complex_.tets
    neg = f[tets] < 0
    count = neg.sum(axis=1)
    cross = (count > 0) & (count < 4)
    if not np.any(cross):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                            np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2)))
    ct = tets[cross]
    cneg = neg[cross]
    # all sign-changing grid edges of crossing tets, deduplicated
    ge = ct[:, LOCAL_EDGES]  # (C, 6, 2)
    gsign = cneg[:, LOCAL_EDGES]
    change = gsign[:, :, 0] != gsign[:, :, 1]
    keys = np.sort(ge[change], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    vid = np.full(change.shape, -1, dtype=np.int64)
    vid[change] = inverse.ravel()
    fi, fj = f[uniq[:, 0]], f[uniq[:, 1]]
    vi, vj = complex_.vertices[uniq[:, 0]], complex_.vertices[uniq[:, 1]]
    positions = (fi[:, None] * vj - fj[:, None] * vi) / (fi - fj)[:, None]
    edge_key = uniq[:, 0] * (complex_.n_vertices + 1) + uniq[:, 1]

    edge_index = {(a, b): e for e, (a, b) in enumerate(LOCAL_EDGES.tolist())}

    def local(a, b):
        return edge_index[(min(a, b), max(a, b))]

    faces, owner = [], []
    rows = np.arange(len(ct))
    for pattern in range(1, 15):
        bits = [(pattern >> i) & 1 for i in range(4)]
        sel = np.all(cneg == np.array(bits, dtype=bool), axis=1)
        if not np.any(sel):
            continue
        r = rows[sel]
        inside = [i for i in range(4) if bits[i]]
        outside = [i for i in range(4) if not bits[i]]
        if len(inside) in (1, 3):
            a = inside[0] if len(inside) == 1 else outside[0]
            others = [i for i in range(4) if i != a]
            tri = np.stack([vid[r, local(a, o)] for o in others], axis=1)
            faces.append(tri)
            owner.append(r)
        else:
            a, b = inside
            c, d = outside
            quad = np.stack([vid[r, local(a, c)], vid[r, local(a, d)],
                             vid[r, local(b, d)], vid[r, local(b, c)]], axis=1)
            qk = edge_key[quad]
            first = np.argmin(qk, axis=1) % 2 == 0  # diagonal through the smallest edge key
            t1 = np.where(first[:, None], quad[:, [0, 1, 2]], quad[:, [1, 2, 3]])
            t2 = np.where(first[:, None], quad[:, [0, 2, 3]], quad[:, [1, 3, 0]])
            faces += [t1, t2]
            owner += [r, r]
    faces = np.concatenate(faces)
    owner = np.concatenate(owner)
    # orient along the tet SDF gradient (outward)
    fvals = f[ct[owner]]
    grad = np.einsum("mj,mjk->mk", fvals, complex_.affine[np.nonzero(cross)[0][owner], :, :3])
    p = positions[faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    flip = np.einsum("ij,ij->i", n, grad) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    order = np.lexsort((faces[:, 2], faces[:, 1], faces[:, 0]))
    return TriangleMesh(positions, faces[order], uniq, np.stack([fi, fj], axis=1))


@dataclass
class MeshMaps:
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray
    triangle: np.ndarray  # hit face per pixel, -1 on miss
    t_hit: np.ndarray  # ray distance


def _pixel_bins(tri_pos, camera):
    """Per-pixel candidate triangles from projected bounding boxes (padded by
    one pixel).  Triangles reaching behind the image plane get every pixel."""
    h, w = camera.height, camera.width
    cam = tri_pos @ camera.rotation.T + camera.translation
    z = cam[..., 2]
    front = np.all(z > 1e-9, axis=1)
    behind = np.all(z <= 0.0, axis=1)
    zs = np.where(z > 1e-9, z, 1.0)
    u = camera.fx * cam[..., 0] / zs + camera.cx
    v = camera.fy * cam[..., 1] / zs + camera.cy
    x0 = np.floor(u.min(axis=1) - 0.5) - 1
    x1 = np.ceil(u.max(axis=1) - 0.5) + 1
    y0 = np.floor(v.min(axis=1) - 0.5) - 1
    y1 = np.ceil(v.max(axis=1) - 0.5) + 1
    straddle = ~front & ~behind
    x0[straddle], y0[straddle] = 0, 0
    x1[straddle], y1[straddle] = w - 1, h - 1
    keep = ~behind & (x1 >= 0) & (y1 >= 0) & (x0 <= w - 1) & (y0 <= h - 1)
    ids = np.nonzero(keep)[0]
    x0 = np.clip(x0[keep], 0, w - 1).astype(np.int64)
    x1 = np.clip(x1[keep], 0, w - 1).astype(np.int64)
    y0 = np.clip(y0[keep], 0, h - 1).astype(np.int64)
    y1 = np.clip(y1[keep], 0, h - 1).astype(np.int64)
    ptr, local = K.bin_triangles(x0, x1, y0, y1, w, h)
    return ptr, ids[local]


def mesh_render_maps(mesh: TriangleMesh, camera) -> MeshMaps:
    """Closest watertight ray/triangle hit per pixel: z-depth and face normal."""
    origin, dirs, cosz = camera.rays()
    p = mesh.positions[mesh.faces]
    ptr, cand = _pixel_bins(p, camera)
    depth, tri, t_hit = K.cast_triangles(origin, dirs, cosz, np.ascontiguousarray(p[:, 0]),
                                         np.ascontiguousarray(p[:, 1]),
                                         np.ascontiguousarray(p[:, 2]), ptr, cand)
    h, w = camera.height, camera.width
    normal = np.zeros((len(tri), 3))
    hit = tri >= 0
    normal[hit] = mesh.face_normals()[tri[hit]]
    return MeshMaps(depth.reshape(h, w), normal.reshape(h, w, 3), hit.reshape(h, w),
                    tri.reshape(h, w), t_hit.reshape(h, w))


def mesh_maps_backward(mesh: TriangleMesh, camera, maps: MeshMaps, grad_depth, grad_normal,
                       n_grid_vertices: int, grid_positions):
    """Gradients of a loss on (depth, normal) maps with respect to grid SDF
    values and grid vertex positions, through the ray/plane intersection and
    the edge-crossing formula.  Returns (d_sdf, d_positions)."""
    origin, dirs, cosz = camera.rays()
    tri = maps.triangle.ravel()
    hit = np.nonzero(tri >= 0)[0]
    gd = np.asarray(grad_depth, dtype=np.float64).ravel()[hit] * cosz[hit]
    gn = np.asarray(grad_normal, dtype=np.float64).reshape(-1, 3)[hit]
    f = mesh.faces[tri[hit]]
    A, B, C = (mesh.positions[f[:, i]] for i in range(3))
    d = dirs[hit]
    N = np.cross(B - A, C - A)
    dn = np.einsum("ij,ij->i", d, N)
    t = np.einsum("ij,ij->i", A - origin, N) / dn
    P = origin + t[:, None] * d
    nlen = np.linalg.norm(N, axis=1)
    n = N / nlen[:, None]
    # dL/dN from the depth (t = (A - o).N / d.N) and from the unit normal
    gN = gd[:, None] * (A - P) / dn[:, None]
    gN += (gn - np.einsum("ij,ij->i", gn, n)[:, None] * n) / nlen[:, None]
    gB = np.cross(C - A, gN)
    gC = np.cross(gN, B - A)
    gA = -(gB + gC) + gd[:, None] * N / dn[:, None]
    gpos = np.zeros((mesh.n_vertices, 3))
    for idx, g in ((f[:, 0], gA), (f[:, 1], gB), (f[:, 2], gC)):
        np.add.at(gpos, idx, g)
    return edge_chain(mesh, gpos, n_grid_vertices, grid_positions)


def edge_chain(mesh: TriangleMesh, g_mesh_positions, n_grid_vertices: int, grid_positions):
    """Pull mesh-vertex gradients back to grid SDF values and grid positions
    through v = (f_i v_j - f_j v_i) / (f_i - f_j)."""
    g = np.asarray(g_mesh_positions, dtype=np.float64)
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    fi, fj = mesh.edge_sdf[:, 0], mesh.edge_sdf[:, 1]
    den = fi - fj
    vi, vj = grid_positions[i], grid_positions[j]
    gv = np.einsum("ij,ij->i", g, vi - vj) / den**2
    d_sdf = np.zeros(n_grid_vertices)
    np.add.at(d_sdf, i, fj * gv)
    np.add.at(d_sdf, j, -fi * gv)
    d_pos = np.zeros((n_grid_vertices, 3))
    np.add.at(d_pos, i, (-fj / den)[:, None] * g)
    np.add.at(d_pos, j, (fi / den)[:, None] * g)
    return d_sdf, d_pos


def export_mesh(mesh: TriangleMesh, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if mesh.n_faces == 0:
        logger.warning("exporting an empty mesh to %s", path)
    try:
        if fmt == "obj":
            with open(path, "w") as fh:
                for p in mesh.positions:
                    fh.write("v %.9g %.9g %.9g\n" % tuple(p))
                for f in mesh.faces + 1:
                    fh.write("f %d %d %d\n" % tuple(f))
        elif fmt == "ply":
            header = ("ply\nformat binary_little_endian 1.0\n"
                      f"element vertex {mesh.n_vertices}\n"
                      "property double x\nproperty double y\nproperty double z\n"
                      f"element face {mesh.n_faces}\n"
                      "property list uchar int vertex_indices\nend_header\n")
            face_rec = np.zeros(mesh.n_faces, dtype=[("n", "u1"), ("v", "<i4", (3,))])
            face_rec["n"] = 3
            face_rec["v"] = mesh.faces
            with open(path, "wb") as fh:
                fh.write(header.encode("ascii"))
                fh.write(np.ascontiguousarray(mesh.positions, dtype="<f8").tobytes())
                fh.write(face_rec.tobytes())
        else:
            raise ValueError(f"unknown mesh format {fmt!r}")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    try:
        if path.suffix.lower() == ".ply":
            return _load_ply(path)
        verts, faces = [], []
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(x.split("/")[0]) for x in parts[1:]]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
        pos = np.array(verts, dtype=np.float64).reshape(-1, 3)
        fac = np.array(faces, dtype=np.int64).reshape(-1, 3)
        fac = np.where(fac < 0, fac + len(pos), fac - 1)
        return TriangleMesh(pos, fac)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


_PLY_TYPES = {"char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1", "short": "i2",
              "ushort": "u2", "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
              "float": "f4", "float32": "f4", "double": "f8", "float64": "f8"}


def _load_ply(path: Path) -> TriangleMesh:
    data = path.read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise IoFailure(f"{path}: only binary little-endian PLY is supported")
    elements = []
    for line in header:
        tok = line.split()
        if tok and tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok and tok[0] == "property":
            elements[-1][2].append(tok[1:])
    offset = end
    pos = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if all(p[0] != "list" for p in props):
            dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
            arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            offset += dt.itemsize * count
            if name == "vertex":
                pos = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
        else:
            (_, ctype, itype, _), = props
            cdt, idt = np.dtype("<" + _PLY_TYPES[ctype]), np.dtype("<" + _PLY_TYPES[itype])
            rows = []
            for _ in range(count):
                n = int(np.frombuffer(data, cdt, 1, offset)[0])
                offset += cdt.itemsize
                rows.append(np.frombuffer(data, idt, n, offset).astype(np.int64))
                offset += idt.itemsize * n
            tris = [[r[0], r[k], r[k + 1]] for r in rows for k in range(1, len(r) - 1)]
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(pos, faces)
