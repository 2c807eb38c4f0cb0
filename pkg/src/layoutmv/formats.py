"""Binary file formats: MVRC condition/plane files, epipolar mask files, PLY, PNG.

MVRC header (little-endian, 20 bytes): magic ``b"MVRC"``, then u32 version,
H, W, m. Two payloads share it and are told apart by size:

* condition stack: sem u16[H,W,m], depth f32[H,W,m], local f32[H,W,3], global f32[H,W,3]
* plane set: f32[H,W,m] (depth maps, masks stored as 0/1)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .raster import ConditionStack

MVRC_MAGIC = b"MVRC"
MVRM_MAGIC = b"MVRM"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_MASK_HEADER = struct.Struct("<4sIIIII")


class FormatError(ValueError):
    pass


def _stack_nbytes(h: int, w: int, m: int) -> int:
    return h * w * (m * 2 + m * 4 + 3 * 4 + 3 * 4)


def write_condition_stack(path, stack) -> None:
    h, w, m = stack.sem.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MVRC_MAGIC, VERSION, h, w, m))
        fh.write(np.ascontiguousarray(stack.sem, dtype="<u2").tobytes())
        fh.write(np.ascontiguousarray(stack.depth, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(stack.local, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(stack.global_, dtype="<f4").tobytes())


def write_planes(path, planes: np.ndarray) -> None:
    """Write an (H, W) or (H, W, m) float plane set."""
    planes = np.asarray(planes)
    if planes.ndim == 2:
        planes = planes[..., None]
    h, w, m = planes.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MVRC_MAGIC, VERSION, h, w, m))
        fh.write(np.ascontiguousarray(planes, dtype="<f4").tobytes())


def read_mvrc(path):
    """Read an MVRC file.

    Returns ``("stack", (sem, depth, local, global))`` or ``("planes", array)``.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, h, w, m = _HEADER.unpack_from(data)
    if magic != MVRC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = memoryview(data)[_HEADER.size:]
    if len(body) == _stack_nbytes(h, w, m):
        off = 0

        def take(dtype, shape):
            nonlocal off
            n = int(np.prod(shape)) * np.dtype(dtype).itemsize
            arr = np.frombuffer(body[off:off + n], dtype=dtype).reshape(shape).copy()
            off += n
            return arr

        sem = take("<u2", (h, w, m))
        depth = take("<f4", (h, w, m))
        local = take("<f4", (h, w, 3))
        glob = take("<f4", (h, w, 3))
        return "stack", (sem, depth, local, glob)
    if len(body) == h * w * m * 4:
        return "planes", np.frombuffer(body, dtype="<f4").reshape(h, w, m).copy()
    raise FormatError(f"{path}: payload size {len(body)} matches neither layout")


def read_condition_stack(path):
    """Read a condition-stack file back into a :class:`~layoutmv.raster.ConditionStack`."""
    kind, payload = read_mvrc(path)
    if kind != "stack":
        raise FormatError(f"{path}: expected a condition stack, found a plane file")
    return ConditionStack(*payload)


def read_planes(path) -> np.ndarray:
    kind, payload = read_mvrc(path)
    if kind != "planes":
        raise FormatError(f"{path}: expected a plane file, found a condition stack")
    return payload


# ---------------------------------------------------------------------- masks


def write_mask_file(path, mask) -> None:
    """Header {magic, version, h, w, N, query_view} + packed rows.

    Rows are ordered by query cell (row-major), then by target view ascending,
    skipping the query view. Each row is h*w bits, little bit order, padded to
    a byte boundary.
    """
    h, w = mask.query_resolution
    n = mask.n_views
    with open(path, "wb") as fh:
        fh.write(_MASK_HEADER.pack(MVRM_MAGIC, VERSION, h, w, n, mask.query_view))
        others = [j for j in range(n) if j != mask.query_view]
        rows = mask.bits[others].transpose(1, 0, 2)  # (hw, N-1, hw)
        fh.write(np.packbits(rows, axis=-1, bitorder="little").tobytes())


def read_mask_file(path):
    data = Path(path).read_bytes()
    if len(data) < _MASK_HEADER.size:
        raise FormatError(f"{path}: truncated mask header")
    magic, version, h, w, n, qv = _MASK_HEADER.unpack_from(data)
    if magic != MVRM_MAGIC or version != VERSION:
        raise FormatError(f"{path}: not a mask file")
    hw = h * w
    row_bytes = (hw + 7) // 8
    body = np.frombuffer(data, dtype=np.uint8, offset=_MASK_HEADER.size)
    if body.size != hw * (n - 1) * row_bytes:
        raise FormatError(f"{path}: payload size mismatch")
    rows = np.unpackbits(body.reshape(hw, n - 1, row_bytes), axis=-1, count=hw, bitorder="little")
    bits = np.zeros((n, hw, hw), bool)
    others = [j for j in range(n) if j != qv]
    bits[others] = rows.astype(bool).transpose(1, 0, 2)
    return (h, w), n, qv, bits


# ---------------------------------------------------------------------- PLY


def write_ply(path, positions: np.ndarray, colors: np.ndarray) -> None:
    n = len(positions)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                             ("r", "u1"), ("g", "u1"), ("b", "u1")])
    rec["x"], rec["y"], rec["z"] = positions[:, 0], positions[:, 1], positions[:, 2]
    rec["r"], rec["g"], rec["b"] = colors[:, 0], colors[:, 1], colors[:, 2]
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read the PLY layout written by :func:`write_ply`."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    n = next(int(line.split()[-1]) for line in header if line.startswith("element vertex"))
    rec = np.frombuffer(data, offset=end + len(b"end_header\n"), count=n,
                        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                               ("r", "u1"), ("g", "u1"), ("b", "u1")])
    pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    col = np.stack([rec["r"], rec["g"], rec["b"]], axis=1).copy()
    return pos, col


# ---------------------------------------------------------------------- PNG


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image)).save(path, optimize=False)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def save_mask_png(path, mask: np.ndarray) -> None:
    save_png(path, (np.asarray(mask, bool) * 255).astype(np.uint8))


def load_mask_png(path) -> np.ndarray:
    return load_png(path) > 127


def save_depth_png16(path, depth: np.ndarray) -> None:
    """16-bit PNG preview in millimeters (saturates at 65.535 m)."""
    mm = np.clip(np.round(np.nan_to_num(depth) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def colorize_labels(labels: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(1234)
    palette = rng.integers(40, 255, size=(65536 if labels.max(initial=0) > 255 else 256, 3), dtype=np.uint8)
    palette[0] = 0
    return palette[labels]


def normalize_depth_preview(depth: np.ndarray) -> np.ndarray:
    valid = depth > 0
    out = np.zeros(depth.shape, np.uint8)
    if np.any(valid):
        lo, hi = depth[valid].min(), depth[valid].max()
        scale = 255.0 / max(hi - lo, 1e-9)
        out[valid] = np.clip(255 - (depth[valid] - lo) * scale, 1, 255).astype(np.uint8)
    return out
