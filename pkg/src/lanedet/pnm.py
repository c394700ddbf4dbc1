"""Binary PPM (P6) and PGM (P5) reading/writing, 8-bit, maxval 255.

Zero-dependency and lossless for 8-bit data; probability maps are stored
scaled by 255 (1.0 <-> 255) and class-id masks raw.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import FormatError


def _read_header(blob: bytes, path: str):
    """Parse magic, width, height, maxval; returns (magic, w, h, data offset)."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        if pos >= len(blob):
            raise FormatError(f"{path}: truncated header")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            nl = blob.find(b"\n", pos)
            pos = len(blob) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    pos += 1  # single whitespace byte after maxval
    magic = tokens[0].decode("ascii", "replace")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise FormatError(f"{path}: non-numeric header fields") from None
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    return magic, w, h, pos


def read_ppm(path: str) -> np.ndarray:
    """-> (H, W, 3) uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, w, h, off = _read_header(blob, path)
    if magic != "P6":
        raise FormatError(f"{path}: bad magic {magic!r}, expected P6")
    need = w * h * 3
    if len(blob) - off < need:
        raise FormatError(f"{path}: pixel data truncated")
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3).copy()


def read_pgm(path: str) -> np.ndarray:
    """-> (H, W) uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, w, h, off = _read_header(blob, path)
    if magic != "P5":
        raise FormatError(f"{path}: bad magic {magic!r}, expected P5")
    need = w * h
    if len(blob) - off < need:
        raise FormatError(f"{path}: pixel data truncated")
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=off).reshape(h, w).copy()


def read_pnm_size(path: str) -> tuple[int, int]:
    """(H, W) from either a P5 or P6 header without decoding pixels."""
    with open(path, "rb") as fh:
        head = fh.read(256)
    magic, w, h, _ = _read_header(head, path)
    if magic not in ("P5", "P6"):
        raise FormatError(f"{path}: bad magic {magic!r}")
    return h, w


def _atomic_write(path: str, blob: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_ppm(path: str, img: np.ndarray) -> None:
    """img: (H, W, 3) uint8."""
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise FormatError(f"write_ppm needs (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    _atomic_write(path, b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def write_pgm(path: str, arr: np.ndarray) -> None:
    """arr: (H, W) uint8."""
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise FormatError(f"write_pgm needs (H, W) uint8, got {arr.shape} {arr.dtype}")
    h, w = arr.shape
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def float_to_u8(x: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8, round-half-even, clipped."""
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def u8_to_float(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) / 255.0
