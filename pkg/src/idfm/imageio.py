"""Binary PPM (P6) and PGM (P5) images, maxval 255."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _header(magic: bytes, width: int, height: int) -> bytes:
    return magic + b"\n%d %d\n255\n" % (width, height)


def encode_ppm(img: np.ndarray) -> bytes:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"PPM needs a uint8 [H, W, 3] array, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    return _header(b"P6", w, h) + np.ascontiguousarray(img).tobytes()


def encode_pgm(img: np.ndarray) -> bytes:
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ImageFormatError(f"PGM needs a uint8 [H, W] array, got {img.dtype} {img.shape}")
    h, w = img.shape
    return _header(b"P5", w, h) + np.ascontiguousarray(img).tobytes()


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    pos = 0
    while len(out) < count:
        if pos >= len(data):
            raise ImageFormatError("truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace() and data[end:end + 1] != b"#":
                end += 1
            out.append(data[pos:end])
            pos = end
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    toks, start = _tokens(data, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise ImageFormatError(f"bad header: {toks}") from exc
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    raster = data[start:start + n]
    if len(raster) != n:
        raise ImageFormatError(f"expected {n} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).copy()
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(img))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    img = decode_pnm(Path(path).read_bytes())
    if img.ndim != 3:
        raise ImageFormatError(f"{path}: not a PPM (P6) image")
    return img


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    img = decode_pnm(Path(path).read_bytes())
    if img.ndim != 2:
        raise ImageFormatError(f"{path}: not a PGM (P5) image")
    return img
