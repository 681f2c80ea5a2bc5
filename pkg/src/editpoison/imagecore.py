"""Float RGB images, pixel math and binary PPM I/O.

Images are plain ``numpy`` arrays of shape ``(H, W, 3)`` with ``float32``
values in ``[0, 1]``. 8-bit quantization only happens at the file boundary.
"""
from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)
SEPIA = np.array(
    [[0.393, 0.769, 0.189], [0.349, 0.686, 0.168], [0.272, 0.534, 0.131]],
    dtype=np.float64,
)


class Rgb(NamedTuple):
    r: float
    g: float
    b: float


class PPMError(ValueError):
    """Malformed or truncated PPM payload."""


def new_image(height: int, width: int, fill=(0.0, 0.0, 0.0)) -> np.ndarray:
    img = np.empty((height, width, 3), dtype=np.float32)
    img[...] = np.asarray(fill, dtype=np.float32)
    return clamp(img)


def as_image(data) -> np.ndarray:
    """Validate and convert ``data`` into a float32 ``(H, W, 3)`` image."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def clamp(img) -> np.ndarray:
    return np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def grayscale(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    y = img.astype(np.float64) @ LUMA
    return clamp(np.repeat(y[..., None], 3, axis=-1))


def sepia(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return clamp(img @ SEPIA.T)


def to_bytes(img) -> np.ndarray:
    return np.round(clamp(img).astype(np.float64) * 255.0).astype(np.uint8)


def encode_ppm(img) -> bytes:
    img = as_image(img)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes(img).tobytes()


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMError(f"truncated header at byte offset {start}")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    magic, pos = _header_token(buf, 0)
    if magic != b"P6":
        raise PPMError(f"bad magic {magic!r} at byte offset 0")
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _header_token(buf, pos)
        if not tok.isdigit():
            raise PPMError(f"non-numeric header field {tok!r} near byte offset {start}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval} (only 255) near byte offset {pos}")
    if w <= 0 or h <= 0:
        raise PPMError(f"invalid dimensions {w}x{h} near byte offset {pos}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PPMError(f"missing whitespace after header at byte offset {pos}")
    pos += 1
    need = w * h * 3
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise PPMError(
            f"truncated payload at byte offset {pos + len(payload)}: "
            f"expected {need} pixel bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float32) / np.float32(255.0)


def save_image(img, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def load_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
