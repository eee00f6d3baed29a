"""Binary tensor files and 8-bit image export.

Tensor file layout (little-endian throughout):
    magic   4 bytes  b"NTSR"
    version u32      currently 1
    dtype   u32      0 = float32, 1 = float64
    rank    u32
    extents u64 * rank
    payload row-major scalars
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"NTSR"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(path, array):
    array = np.asarray(array)
    if array.dtype not in _CODE_FOR:
        raise DataError(f"{path}: unsupported dtype {array.dtype}, use float32/float64")
    code = _CODE_FOR[array.dtype]
    header = MAGIC + struct.pack("<III", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape) if array.ndim else b""
    payload = np.ascontiguousarray(array).astype(
        _DTYPE_CODES[code], copy=False
    ).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read tensor file {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise DataError(f"{path}: not a tensor file (bad magic)")
    version, code, rank = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported tensor file version {version}")
    if code not in _DTYPE_CODES:
        raise DataError(f"{path}: unknown dtype code {code}")
    offset = 16
    shape = struct.unpack_from(f"<{rank}Q", raw, offset) if rank else ()
    offset += 8 * rank
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape)) if shape else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise DataError(
            f"{path}: payload length {len(raw) - offset} does not match shape {shape}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.reshape(shape).copy()


def write_ppm(path, rgb):
    """Write an 8-bit color preview; rgb is (3, H, W) in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DataError(f"{path}: expected (3, H, W) image, got {rgb.shape}")
    pixels = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape[1:]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    """Read a binary P6 image back to (3, H, W) floats in [0, 1]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise DataError(f"{path}: not a binary PPM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1
    w, h, maxval = fields
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def write_pgm(path, gray, max_value=None):
    """Write an 8-bit grayscale preview; gray is (H, W), scaled by max_value."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise DataError(f"{path}: expected (H, W) image, got {gray.shape}")
    top = float(np.max(gray)) if max_value is None else float(max_value)
    top = top if top > 0 else 1.0
    pixels = np.clip(np.round(gray / top * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())
