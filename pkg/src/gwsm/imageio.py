"""Binary PPM (P6) and PGM (P5) reading and writing.

Pixel payloads are 8-bit.  These two formats carry every artifact this
package puts on disk: dataset images, ground-truth and pseudo-label masks,
CAM heatmaps, and overlays.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DataError


def write_pgm(path: str | os.PathLike, gray: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM."""
    arr = np.asarray(gray)
    if arr.ndim != 2:
        raise DataError(f"PGM payload must be 2-D, got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_ppm(path: str | os.PathLike, rgb: np.ndarray) -> None:
    """Write a (H, W, 3) uint8 array as binary PPM."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"PPM payload must be (H, W, 3), got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _read_header(fh, path) -> tuple[bytes, int, int, int]:
    """Parse magic, width, height, maxval; '#' comments allowed."""
    def tokens():
        while True:
            chunk = b""
            while True:
                ch = fh.read(1)
                if not ch:
                    raise DataError(f"{path}: truncated header")
                if ch == b"#":
                    while ch not in (b"\n", b""):
                        ch = fh.read(1)
                    continue
                if ch.isspace():
                    if chunk:
                        break
                    continue
                chunk += ch
            yield chunk

    tok = tokens()
    magic = next(tok)
    try:
        w, h, maxval = (int(next(tok)) for _ in range(3))
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric header field") from exc
    return magic, w, h, maxval


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM into a (H, W) uint8 array."""
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_header(fh, path)
        if magic != b"P5":
            raise DataError(f"{path}: expected P5, got {magic!r}")
        if maxval != 255:
            raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
        payload = fh.read(w * h)
    if len(payload) != w * h:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PPM into a (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_header(fh, path)
        if magic != b"P6":
            raise DataError(f"{path}: expected P6, got {magic!r}")
        if maxval != 255:
            raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
        payload = fh.read(w * h * 3)
    if len(payload) != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()
