"""16-bit PNM, PFM and exposure-list readers and writers.

Writers always emit the canonical header, so a file produced here survives a
load/save cycle byte for byte.
"""
from __future__ import annotations

import os
import re
from typing import Sequence, Tuple

import numpy as np

PNM_MAXVAL = 65535


class SceneFormatError(ValueError):
    """A file exists but its contents are not in the expected format."""


class MissingSceneFileError(FileNotFoundError):
    pass


class ExposureOrderError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


_TOKEN = re.compile(rb"\s*(\S+)")


def _header(buf: bytes, count: int) -> Tuple[list, int]:
    """Read ``count`` whitespace-separated header tokens and the data offset."""
    tokens, pos = [], 0
    for _ in range(count):
        while True:
            m = _TOKEN.match(buf, pos)
            if m is None:
                raise SceneFormatError("truncated header")
            if m.group(1).startswith(b"#"):
                end = buf.find(b"\n", m.start(1))
                pos = len(buf) if end < 0 else end + 1
                continue
            tokens.append(m.group(1))
            pos = m.end(1)
            break
    if pos >= len(buf) or buf[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise SceneFormatError("header not terminated by whitespace")
    return tokens, pos + 1


def _read(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError as exc:
        raise MissingSceneFileError(str(path)) from exc


def _dims(tokens) -> Tuple[int, int]:
    try:
        w, h = int(tokens[0]), int(tokens[1])
    except ValueError as exc:
        raise SceneFormatError("non-integer image size") from exc
    if w <= 0 or h <= 0:
        raise SceneFormatError("image size must be positive")
    return h, w


def _decode_pnm(buf: bytes, magic: bytes, channels: int) -> np.ndarray:
    if buf[:2] != magic:
        raise SceneFormatError(f"expected {magic.decode()} magic, got {buf[:2]!r}")
    tokens, off = _header(buf[2:], 3)
    h, w = _dims(tokens)
    maxval = int(tokens[2])
    if not 0 < maxval <= PNM_MAXVAL:
        raise SceneFormatError(f"bad maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = h * w * channels
    data = buf[2 + off :]
    if len(data) < n * dtype.itemsize:
        raise SceneFormatError("pixel data truncated")
    arr = np.frombuffer(data, dtype=dtype, count=n).astype(np.float64) / maxval
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def _encode_pnm(img: np.ndarray, magic: bytes) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if np.any(img < 0) or np.any(img > 1) or not np.all(np.isfinite(img)):
        raise ValueError("PNM values must lie in [0, 1]")
    h, w = img.shape[:2]
    q = np.round(img * PNM_MAXVAL).astype(">u2")
    return magic + f"\n{w} {h}\n{PNM_MAXVAL}\n".encode() + q.tobytes()


def read_ppm(path) -> np.ndarray:
    """H×W×3 image in [0, 1] from a binary PPM (8 or 16 bit)."""
    return _decode_pnm(_read(path), b"P6", 3)


def write_ppm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM expects H×W×3, got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(_encode_pnm(img, b"P6"))


def read_pgm(path) -> np.ndarray:
    return _decode_pnm(_read(path), b"P5", 1)


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM expects H×W, got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(_encode_pnm(img, b"P5"))


def read_pfm(path) -> np.ndarray:
    """H×W×3 float image from a color PFM, returned top row first."""
    buf = _read(path)
    if buf[:2] != b"PF":
        raise SceneFormatError(f"expected PF magic, got {buf[:2]!r}")
    tokens, off = _header(buf[2:], 3)
    h, w = _dims(tokens)
    try:
        scale = float(tokens[2])
    except ValueError as exc:
        raise SceneFormatError("bad PFM scale") from exc
    if scale == 0:
        raise SceneFormatError("PFM scale must be nonzero")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    data = buf[2 + off :]
    n = h * w * 3
    if len(data) < n * 4:
        raise SceneFormatError("pixel data truncated")
    arr = np.frombuffer(data, dtype=dtype, count=n).reshape(h, w, 3)
    return arr[::-1].astype(np.float64)


def write_pfm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PFM expects H×W×3, got {img.shape}")
    h, w = img.shape[:2]
    body = np.ascontiguousarray(img[::-1], dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode() + body)


def read_exposures(path) -> Tuple[float, ...]:
    text = _read(path).decode("ascii", errors="replace")
    try:
        times = tuple(float(tok) for tok in text.split())
    except ValueError as exc:
        raise SceneFormatError(f"{path}: exposure times must be decimal numbers") from exc
    if len(times) != 3:
        raise SceneFormatError(f"{path}: expected 3 exposure times, found {len(times)}")
    return times


def write_exposures(path, times: Sequence[float]):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("".join(f"{float(t)!r}\n" for t in times))


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
