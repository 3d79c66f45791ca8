"""Binary netpbm readers and writers (P6 color, P5 grayscale, maxval 255)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

__all__ = ["write_ppm", "read_ppm", "write_pgm", "read_pgm"]


def _header(magic: bytes, w: int, h: int, comment: str | None) -> bytes:
    lines = [magic]
    if comment:
        for part in comment.splitlines():
            lines.append(b"# " + part.encode())
    lines.append(f"{w} {h}".encode())
    lines.append(b"255")
    return b"\n".join(lines) + b"\n"


def write_ppm(path, rgb: np.ndarray, comment: str | None = None) -> None:
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ShapeError(f"write_ppm needs uint8 (H, W, 3), got {arr.dtype} {arr.shape}")
    h, w = arr.shape[:2]
    Path(path).write_bytes(_header(b"P6", w, h, comment) + arr.tobytes())


def write_pgm(path, gray: np.ndarray, comment: str | None = None) -> None:
    arr = np.asarray(gray)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ShapeError(f"write_pgm needs uint8 (H, W), got {arr.dtype} {arr.shape}")
    h, w = arr.shape
    Path(path).write_bytes(_header(b"P5", w, h, comment) + arr.tobytes())


def _parse(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"image file not found: {path}") from None
    if not data.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} netpbm file")
    pos = len(magic)
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(data):
            raise DataError(f"{path}: truncated header")
        c = data[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise DataError(f"{path}: truncated header")
            pos = nl + 1
        elif c.isdigit():
            end = pos
            while end < len(data) and data[end : end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise DataError(f"{path}: unexpected byte {c!r} in header")
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise DataError(f"{path}: missing raster separator")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise DataError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    return np.frombuffer(raster, dtype=np.uint8), w, h


def read_ppm(path) -> np.ndarray:
    flat, w, h = _parse(path, b"P6")
    return flat.reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    flat, w, h = _parse(path, b"P5")
    return flat.reshape(h, w).copy()
