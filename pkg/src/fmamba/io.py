"""Grayscale image files: binary PGM read/write and 8-bit PNG read."""
from __future__ import annotations

from pathlib import Path

import numpy as np

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    pass


def _header(data: bytes, path) -> tuple[int, int, int, int]:
    """Parse ``P5 <w> <h> <maxval>`` and return the dims, maxval and payload offset."""
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed PGM header at byte {start}")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: truncated PGM header at byte {pos}")
    width, height, maxval = fields
    return width, height, maxval, pos + 1


def _read_pgm(data: bytes, path) -> np.ndarray:
    width, height, maxval, offset = _header(data, path)
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: empty image {width}x{height}")
    if maxval == 255:
        dtype = np.dtype("u1")
    elif maxval == 65535:
        dtype = np.dtype(">u2")
    else:
        raise ImageFormatError(f"{path}: unsupported bit depth (maxval {maxval}; need 255 or 65535)")
    need = width * height * dtype.itemsize
    have = len(data) - offset
    if have < need:
        raise ImageFormatError(f"{path}: truncated payload at byte {len(data)} "
                               f"(expected {offset + need} bytes)")
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=offset)
    return pixels.reshape(height, width).astype(np.float64) / maxval


def _read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode != "L":
            raise ImageFormatError(f"{path}: unsupported PNG mode {im.mode!r}; need 8-bit grayscale")
        return np.asarray(im, dtype=np.float64) / 255.0


def read_image(path) -> np.ndarray:
    """Load a P5 PGM (8 or 16 bit) or 8-bit grayscale PNG as float64 in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P5":
        return _read_pgm(data, path)
    if data[:8] == PNG_MAGIC:
        return _read_png(path)
    raise ImageFormatError(f"{path}: unknown magic {data[:2]!r}")


def quantize(x) -> np.ndarray:
    """Map [0, 1] to bytes rounding half away from zero."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an [H, W] image, got shape {x.shape}")
    if not np.isfinite(x).all() or x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def write_image(x, path) -> None:
    q = quantize(x)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())
