"""Binary PGM (P5) and PPM (P6) reading and writing, 8 bits per sample."""
from __future__ import annotations

import os
from typing import BinaryIO

import numpy as np


class PNMError(ValueError):
    pass


def _read_token(f: BinaryIO) -> bytes:
    token = b""
    while True:
        ch = f.read(1)
        if not ch:
            break
        if ch == b"#" and not token:
            f.readline()
            continue
        if ch.isspace():
            if token:
                break
            continue
        token += ch
    return token


def _read(path: str | os.PathLike, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        got = _read_token(f)
        if got != magic:
            raise PNMError(f"{path}: expected {magic.decode()} header, found {got[:8]!r}")
        try:
            width, height, maxval = (int(_read_token(f)) for _ in range(3))
        except ValueError as exc:
            raise PNMError(f"{path}: malformed header") from exc
        if maxval != 255:
            raise PNMError(f"{path}: only 8-bit images are supported (maxval {maxval})")
        # exactly one whitespace byte separates the header from the raster, consumed by _read_token
        raster = f.read(width * height * channels)
    if len(raster) != width * height * channels:
        raise PNMError(f"{path}: truncated raster")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(height, width) if channels == 1 else arr.reshape(height, width, channels)


def _write(path, magic: bytes, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    height, width = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (width, height))
        f.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Return an ``[H, W]`` uint8 array."""
    return _read(path, b"P5", 1)


def write_pgm(path, pixels: np.ndarray) -> None:
    if np.ndim(pixels) != 2:
        raise PNMError("PGM data must be 2-D")
    _write(path, b"P5", pixels)


def read_ppm(path) -> np.ndarray:
    """Return an ``[H, W, 3]`` uint8 array."""
    return _read(path, b"P6", 3)


def write_ppm(path, pixels: np.ndarray) -> None:
    if np.ndim(pixels) != 3 or np.shape(pixels)[2] != 3:
        raise PNMError("PPM data must be [H, W, 3]")
    _write(path, b"P6", pixels)
