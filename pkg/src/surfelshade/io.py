"""Binary checkpoints and G-buffer plane dumps.

Checkpoint layout (all little-endian)::

    b"RGSC" | u32 version | u32 n_sections
    n_sections x (u16 name_len | name | u8 dtype | u8 ndim | ndim x u32 dim | u64 offset | u64 nbytes)
    raw section bytes at the listed offsets (from the start of the file)

Dtype codes: 0 float32, 1 uint32, 2 uint8, 3 float64. The config echo is a
uint8 section holding UTF-8 JSON.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from . import sphmip
from .config import TrainConfig
from .scene import SPLAT_FIELDS, Splats, write_png
from .shader import ShaderMLP

CKPT_MAGIC = b"RGSC"
CKPT_VERSION = 1
BUF_MAGIC = b"RGSB"
_CODES = {np.dtype("<f4"): 0, np.dtype("<u4"): 1, np.dtype("u1"): 2, np.dtype("<f8"): 3}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


def write_sections(path, sections: dict[str, np.ndarray]):
    items = []
    for name, arr in sections.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _CODES:
            raise CheckpointError(f"section {name!r} has unsupported dtype {arr.dtype}")
        items.append((name.encode(), np.ascontiguousarray(arr, dtype=dt)))
    header_size = 12 + sum(2 + len(n) + 2 + 4 * a.ndim + 16 for n, a in items)
    toc = bytearray(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(items)))
    offset = header_size
    for name, arr in items:
        toc += struct.pack("<H", len(name)) + name
        toc += struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
        toc += struct.pack(f"<{arr.ndim}I", *arr.shape)
        toc += struct.pack("<QQ", offset, arr.nbytes)
        offset += arr.nbytes
    with open(path, "wb") as f:
        f.write(bytes(toc))
        for _, arr in items:
            f.write(arr.tobytes())


def read_sections(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        offset, nbytes = struct.unpack_from("<QQ", data, pos)
        pos += 16
        if offset + nbytes > len(data):
            raise CheckpointError(f"section {name!r} is truncated")
        out[name] = np.frombuffer(data, _DTYPES[code], nbytes // _DTYPES[code].itemsize,
                                  offset).reshape(shape).copy()
    return out


def save_checkpoint(path, model, config: TrainConfig, optimizer=None, iteration=0):
    """Write splats, grid base, MLP weights, optimizer moments and the config echo."""
    sections = {}
    for name in SPLAT_FIELDS:
        sections[f"splats/{name}"] = getattr(model.splats, name)
    sections["grid/base"] = model.grid.base
    sections["grid/levels"] = np.array([model.grid.n_levels], np.uint32)
    for name, value in model.mlp.params.items():
        sections[f"mlp/{name}"] = value
    sections["meta/iteration"] = np.array([iteration], np.uint32)
    if optimizer is not None:
        sections["adam/step"] = np.array([optimizer.step], np.uint32)
        for key, (m, v) in optimizer.moments.items():
            sections[f"adam/m/{key}"] = m
            sections[f"adam/v/{key}"] = v
    echo = json.dumps(config.to_dict(), sort_keys=True).encode()
    sections["config"] = np.frombuffer(echo, np.uint8)
    write_sections(path, sections)


def load_checkpoint(path):
    """Return ``(model, config, sections)``; optimizer moments stay in ``sections``."""
    from .pipeline import Model

    sec = read_sections(path)
    try:
        config = TrainConfig.from_dict(json.loads(bytes(sec["config"]).decode()))
        splats = Splats(**{name: sec[f"splats/{name}"] for name in SPLAT_FIELDS})
        grid = sphmip.SphMipGrid(sec["grid/base"], int(sec["grid/levels"][0]))
        mlp = ShaderMLP({k[4:]: v for k, v in sec.items() if k.startswith("mlp/")})
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} lacks section {exc}") from exc
    return Model(splats, grid, mlp), config, sec


def write_plane(path, plane):
    """Raw dump: b"RGSB" | u32 H | u32 W | u32 C | float32 data."""
    plane = np.asarray(plane, np.float32)
    if plane.ndim == 2:
        plane = plane[..., None]
    H, W, C = plane.shape
    with open(path, "wb") as f:
        f.write(BUF_MAGIC + struct.pack("<III", H, W, C))
        f.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())


def read_plane(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if header[:4] != BUF_MAGIC:
            raise ValueError(f"{path} is not a buffer dump")
        H, W, C = struct.unpack("<III", header[4:])
        return np.frombuffer(f.read(4 * H * W * C), "<f4").reshape(H, W, C).copy()


def plane_preview(name, plane, mask=None):
    """Map a plane to a displayable [0, 1] image."""
    plane = np.asarray(plane, np.float64)
    if plane.ndim == 2:
        plane = plane[..., None]
    if name == "normal":
        return (plane + 1.0) / 2.0
    if name == "depth":
        valid = np.ones(plane.shape[:2], bool) if mask is None else mask
        if not valid.any():
            return np.zeros_like(plane)
        lo, hi = plane[valid].min(), plane[valid].max()
        return np.where(valid[..., None], (plane - lo) / (hi - lo if hi > lo else 1.0), 0.0)
    if plane.shape[2] not in (1, 3):
        plane = plane[..., :3] if plane.shape[2] > 3 else plane[..., :1]
    return np.clip(plane, 0.0, 1.0)


def dump_planes(directory, planes: dict, mask=None, prefix=""):
    """Write every plane as ``<prefix><name>.png`` plus ``<prefix><name>.bin``."""
    os.makedirs(directory, exist_ok=True)
    written = []
    for name, plane in planes.items():
        base = os.path.join(directory, f"{prefix}{name}")
        write_plane(base + ".bin", plane)
        write_png(base + ".png", plane_preview(name, plane, mask))
        written.append(base)
    return written
