"""Binary checkpoint container.

Layout (little-endian): ``b"TSDF"``, u32 version, u32 block count, then per
block: u16 name length, name (utf-8), u8 dtype length, dtype string
(numpy ``str``), u8 ndim, ndim x u64 dims, u64 byte count, raw data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .field import Appearance, Scene
from .geometry import TetComplex

MAGIC = b"TSDF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_blocks(path, blocks: dict) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(blocks))]
    for name, arr in blocks.items():
        a = np.asarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        key = name.encode("utf-8")
        dt = a.dtype.str.encode("ascii")
        parts += [struct.pack("<H", len(key)), key, struct.pack("<B", len(dt)), dt,
                  struct.pack("<B", a.ndim), struct.pack(f"<{a.ndim}Q", *a.shape),
                  struct.pack("<Q", a.nbytes), np.ascontiguousarray(a).tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_blocks(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + n].decode("utf-8")
            off += n
            (n,) = struct.unpack_from("<B", data, off)
            off += 1
            dt = np.dtype(data[off:off + n].decode("ascii"))
            off += n
            (nd,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}Q", data, off)
            off += 8 * nd
            (nbytes,) = struct.unpack_from("<Q", data, off)
            off += 8
            if off + nbytes > len(data):
                raise CheckpointError(f"{path}: block {name!r} is truncated")
            out[name] = np.frombuffer(data[off:off + nbytes], dtype=dt).reshape(shape).copy()
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out


def save_checkpoint(path, scene: Scene, state=None, iteration: int = 0) -> None:
    c = scene.complex
    blocks = {
        "vertices": c.vertices, "tets": c.tets, "neighbors": c.neighbors,
        "generation": np.array([c.generation], dtype=np.int64),
        "sdf": scene.sdf, "sh": scene.appearance.sh, "color_grad": scene.appearance.grad,
        "sh_degree": np.array([scene.appearance.degree], dtype=np.int64),
        "log_s": np.array([scene.log_s]), "background": np.asarray(scene.background, float),
        "iteration": np.array([iteration], dtype=np.int64),
    }
    if state is not None:
        blocks["adam_t"] = np.array([state.t], dtype=np.int64)
        for k in sorted(state.m):
            blocks[f"adam_m/{k}"] = state.m[k]
            blocks[f"adam_v/{k}"] = state.v[k]
    write_blocks(path, blocks)


def load_checkpoint(path):
    """Returns (scene, adam state or None, iteration)."""
    from .optim import AdamState

    b = read_blocks(path)
    try:
        cx = TetComplex(b["vertices"], b["tets"], b["neighbors"], int(b["generation"][0]))
        app = Appearance(b["sh"], b["color_grad"], int(b["sh_degree"][0]))
        scene = Scene(cx, b["sdf"], app, float(b["log_s"][0]),
                      tuple(float(x) for x in b["background"]))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing block {exc}") from None
    scene.check()
    state = None
    if "adam_t" in b:
        m = {k.split("/", 1)[1]: v for k, v in b.items() if k.startswith("adam_m/")}
        v = {k.split("/", 1)[1]: x for k, x in b.items() if k.startswith("adam_v/")}
        state = AdamState(m, v, int(b["adam_t"][0]))
    return scene, state, int(b["iteration"][0])
