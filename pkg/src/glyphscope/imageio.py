"""8-bit raster container and binary PGM (P5) / PPM (P6) codecs."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import EmptyImage, InputError


@dataclass(frozen=True)
class ImageBuffer:
    """An 8-bit raster, ``(H, W)`` grayscale or ``(H, W, 3)`` RGB."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise InputError(f"image pixels must be uint8, got {px.dtype}")
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
            raise InputError(f"unsupported image shape {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise EmptyImage("image has no pixels")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def is_rgb(self) -> bool:
        return self.pixels.ndim == 3

    def rgb(self) -> np.ndarray:
        """Pixels as ``(H, W, 3)``; grayscale is replicated across channels."""
        if self.is_rgb:
            return self.pixels
        return np.repeat(self.pixels[:, :, None], 3, axis=2)

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise InputError("truncated PNM header")
    return data[start:pos], pos


def decode_pnm(data: bytes) -> ImageBuffer:
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise InputError(f"not a binary PGM/PPM file (magic {magic!r})")
    try:
        width_tok, pos = _read_token(data, pos)
        height_tok, pos = _read_token(data, pos)
        maxval_tok, pos = _read_token(data, pos)
        width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    except ValueError as exc:
        raise InputError(f"bad PNM header: {exc}") from None
    if maxval != 255:
        raise InputError(f"only maxval 255 is supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise EmptyImage("PNM image has zero size")
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    raster = data[pos:pos + size]
    if len(raster) != size:
        raise InputError(f"PNM raster truncated: expected {size} bytes, got {len(raster)}")
    px = np.frombuffer(raster, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return ImageBuffer(px.reshape(shape).copy())


def encode_pnm(image: ImageBuffer) -> bytes:
    magic = b"P6" if image.is_rgb else b"P5"
    header = b"%s\n%d %d\n255\n" % (magic, image.width, image.height)
    return header + np.ascontiguousarray(image.pixels).tobytes()


def read_image(path: str | os.PathLike) -> ImageBuffer:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_image(path: str | os.PathLike, image: ImageBuffer) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(image))
