"""Greyscale image primitives and binary PGM I/O.

Images are plain 2-D ``numpy.uint8`` arrays of shape ``(height, width)``;
pixel ``(i, j)`` is ``image[i, j]``.  Every function here is pure and never
mutates its inputs.
"""
from __future__ import annotations

import enum
import math
import os
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DimensionMismatch,
    EmptyInput,
    InvalidSigma,
    MalformedHeader,
    TruncatedPixelData,
    UnsupportedMaxval,
    ValidationError,
)

BLUR_LEVELS = (1, 23, 48)


class Stain(str, enum.Enum):
    NUCLEI = "nuclei"
    BODY = "body"


def check_blur_level(level: int) -> int:
    level = int(level)
    if level not in BLUR_LEVELS:
        raise ValidationError(f"blur level must be one of {BLUR_LEVELS}, got {level}")
    return level


def as_gray(image) -> np.ndarray:
    """Validate ``image`` and return it as a 2-D uint8 array.

    Integer or float input is accepted as long as every value is an integer
    in [0, 255]; anything else raises :class:`ValidationError`.
    """
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr
    if arr.size and (arr.min() < 0 or arr.max() > 255 or np.any(arr != np.round(arr))):
        raise ValidationError("pixel values must be integers in [0, 255]")
    return arr.astype(np.uint8)


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (unlike ``np.round``)."""
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(values), 0, 255).astype(np.uint8)


def pixelwise_max(images: Sequence[np.ndarray]) -> np.ndarray:
    """Overlay images by taking the per-pixel maximum.

    Raises:
        EmptyInput: ``images`` is empty.
        DimensionMismatch: the images do not all share one shape.
    """
    if len(images) == 0:
        raise EmptyInput("pixelwise_max needs at least one image")
    arrays = [as_gray(im) for im in images]
    shape = arrays[0].shape
    for arr in arrays[1:]:
        if arr.shape != shape:
            raise DimensionMismatch(f"image shapes differ: {shape} vs {arr.shape}")
    out = arrays[0].copy()
    for arr in arrays[1:]:
        np.maximum(out, arr, out=out)
    return out


def average_intensity(image: np.ndarray) -> float:
    image = as_gray(image)
    return float(image.sum(dtype=np.int64)) / image.size


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian weights with radius ``ceil(3 * sigma)``."""
    if not sigma > 0:
        raise InvalidSigma(f"sigma must be positive, got {sigma}")
    radius = max(1, math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-0.5 * (x / sigma) ** 2)
    return weights / weights.sum()


def gaussian_blur_float(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with border clamping, returned unrounded."""
    kernel = gaussian_kernel(sigma)
    out = np.asarray(image, dtype=np.float64)
    # mode="nearest" replicates the border pixel, i.e. coordinate clamping
    out = ndimage.correlate1d(out, kernel, axis=0, mode="nearest")
    return ndimage.correlate1d(out, kernel, axis=1, mode="nearest")


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    image = as_gray(image)
    return _to_uint8(gaussian_blur_float(image, sigma))


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel-centre alignment: out pixel centre c maps to (c + .5) * n_in / n_out - .5
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, new_width: int, new_height: int) -> np.ndarray:
    """Bilinear resampling, rounded half away from zero and clamped to [0, 255]."""
    image = as_gray(image)
    if new_width < 1 or new_height < 1:
        raise ValidationError("new dimensions must be >= 1")
    h, w = image.shape
    r0, r1, fr = _bilinear_axis(h, new_height)
    c0, c1, fc = _bilinear_axis(w, new_width)
    img = image.astype(np.float64)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bottom * fr[:, None]
    return _to_uint8(out)


# --- PGM ------------------------------------------------------------------

def encode_pgm(image: np.ndarray) -> bytes:
    image = as_gray(image)
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def write_pgm(image: np.ndarray, path: str | os.PathLike) -> None:
    data = encode_pgm(image)
    with open(path, "wb") as fh:
        fh.write(data)


def decode_pgm(data: bytes) -> np.ndarray:
    """Parse a binary ("P5") PGM with maxval 255.

    Comment lines starting with ``#`` are skipped inside the header.
    """
    pos = 0
    tokens: list[bytes] = []
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise MalformedHeader("unexpected end of file inside the header")
        if data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not data[pos : pos + 1].isspace():
        if pos >= n:
            raise TruncatedPixelData("no pixel data after header")
        raise MalformedHeader("maxval must be followed by a single whitespace byte")
    pos += 1

    magic, w_tok, h_tok, max_tok = tokens
    if magic != b"P5":
        raise MalformedHeader(f"unsupported magic number {magic!r}")
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError as exc:
        raise MalformedHeader(f"non-integer header field: {exc}") from None
    if width < 1 or height < 1:
        raise MalformedHeader(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxval(f"only maxval 255 is supported, got {maxval}")
    needed = width * height
    payload = data[pos : pos + needed]
    if len(payload) < needed:
        raise TruncatedPixelData(f"expected {needed} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())
