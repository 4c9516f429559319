"""Minimal Netpbm IO: binary PBM (P4) masks and binary PGM (P5) images.

PGM samples are big-endian 16-bit when maxval > 255, as the format requires.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .errors import DatasetIOError, ValidationError

PathLike = Union[str, os.PathLike]
PGM16_MAX = 65535


def _atomic_write(path: PathLike, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _read_header(data: bytes, count: int, path: PathLike) -> Tuple[List[bytes], int]:
    """Return ``count`` whitespace-separated header tokens and the raster offset."""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise DatasetIOError(f"{path}: truncated Netpbm header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"{path}: cannot read ({exc.strerror or exc})") from exc


def _parse_dims(tokens: List[bytes], path: PathLike) -> Tuple[int, int]:
    try:
        width, height = int(tokens[1]), int(tokens[2])
    except ValueError as exc:
        raise DatasetIOError(f"{path}: malformed dimensions") from exc
    if width < 1 or height < 1:
        raise DatasetIOError(f"{path}: non-positive dimensions {width}x{height}")
    return width, height


def write_pbm(path: PathLike, mask) -> None:
    """Write a boolean H x W mask; set pixels are stored as 1 (black)."""
    bits = np.asarray(mask, dtype=bool)
    if bits.ndim != 2:
        raise ValidationError(f"PBM mask must be 2-d, got shape {bits.shape}")
    h, w = bits.shape
    raster = np.packbits(bits, axis=1).tobytes()
    _atomic_write(path, b"P4\n%d %d\n" % (w, h) + raster)


def read_pbm(path: PathLike) -> np.ndarray:
    data = _read_bytes(path)
    tokens, offset = _read_header(data, 3, path)
    if tokens[0] != b"P4":
        raise DatasetIOError(f"{path}: not a binary PBM (magic {tokens[0]!r})")
    w, h = _parse_dims(tokens, path)
    row_bytes = (w + 7) // 8
    raster = data[offset:offset + row_bytes * h]
    if len(raster) != row_bytes * h:
        raise DatasetIOError(f"{path}: raster truncated")
    packed = np.frombuffer(raster, dtype=np.uint8).reshape(h, row_bytes)
    return np.unpackbits(packed, axis=1, count=w).astype(bool)


def write_pgm(path: PathLike, image, maxval: int = PGM16_MAX) -> None:
    """Write a [0, 1] float image as P5; 16-bit unless ``maxval`` <= 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError(f"PGM image must be 2-d, got shape {img.shape}")
    if not np.all((img >= 0.0) & (img <= 1.0)):
        raise ValidationError("PGM image values must lie in [0, 1]")
    h, w = img.shape
    levels = np.round(img * maxval)
    raster = levels.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    _atomic_write(path, b"P5\n%d %d\n%d\n" % (w, h, maxval) + raster)


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a P5 image and rescale it to floats in [0, 1]."""
    data = _read_bytes(path)
    tokens, offset = _read_header(data, 4, path)
    if tokens[0] != b"P5":
        raise DatasetIOError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h = _parse_dims(tokens, path)
    try:
        maxval = int(tokens[3])
    except ValueError as exc:
        raise DatasetIOError(f"{path}: malformed maxval") from exc
    if not 0 < maxval <= PGM16_MAX:
        raise DatasetIOError(f"{path}: maxval {maxval} out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    nbytes = w * h * dtype.itemsize
    raster = data[offset:offset + nbytes]
    if len(raster) != nbytes:
        raise DatasetIOError(f"{path}: raster truncated")
    levels = np.frombuffer(raster, dtype=dtype).reshape(h, w)
    return levels.astype(np.float64) / maxval
