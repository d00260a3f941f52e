"""Binary PPM (P6) and PGM (P5) reading and writing.

These two formats cover everything the pipeline needs with zero
dependencies and bit-exact round trips.  Values are 8-bit, maxval 255;
in memory images are float64 arrays shaped [3, H, W] in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import InputError, ParseError

__all__ = ["read_image", "write_ppm", "write_pgm"]


def _read_token(f) -> bytes:
    """Next whitespace-delimited header token, skipping '#' comments."""
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ParseError("truncated header")
        if ch == b"#":
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_image(path: str | Path) -> np.ndarray:
    """Load a P6 or P5 file as float64 [3,H,W] in [0,1].

    Grayscale input is replicated across the three channels.
    """
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P6", b"P5"):
            raise ParseError(f"{path}: unsupported magic {magic!r}")
        try:
            w = int(_read_token(f))
            h = int(_read_token(f))
            maxval = int(_read_token(f))
        except ValueError as exc:
            raise ParseError(f"{path}: non-numeric header field") from exc
        if w < 1 or h < 1:
            raise ParseError(f"{path}: bad dimensions {w}x{h}")
        if maxval != 255:
            raise ParseError(f"{path}: only maxval 255 is supported, got {maxval}")
        channels = 3 if magic == b"P6" else 1
        need = w * h * channels
        payload = f.read(need)
        if len(payload) != need:
            raise ParseError(
                f"{path}: payload holds {len(payload)} bytes, expected {need}")
    raw = np.frombuffer(payload, dtype=np.uint8)
    if channels == 3:
        img = raw.reshape(h, w, 3).transpose(2, 0, 1)
    else:
        img = np.broadcast_to(raw.reshape(1, h, w), (3, h, w))
    return img.astype(np.float64) / 255.0


def _quantize(img: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(img)):
        raise InputError("image contains non-finite values")
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Write a [3,H,W] float image in [0,1] as binary P6."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise InputError(f"expected [3,H,W], got shape {img.shape}")
    q = _quantize(img)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.transpose(1, 2, 0).tobytes())


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write a [H,W] float image in [0,1] as binary P5."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InputError(f"expected [H,W], got shape {img.shape}")
    q = _quantize(img)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())
