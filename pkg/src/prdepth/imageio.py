"""Readers and writers for PFM, PPM (P6) and PGM (P5) images.

PFM stores float32 rows bottom-up; the sign of the scale line gives the byte
order (negative means little-endian). Netpbm 16-bit samples are big-endian.
"""

from __future__ import annotations

import os
from typing import BinaryIO

import numpy as np


class ImageFormatError(ValueError):
    """Raised for malformed headers, truncated payloads or unsupported maxvals."""


def _read_token(f: BinaryIO) -> bytes:
    # netpbm-style whitespace/comment aware tokenizer
    token = b""
    while True:
        c = f.read(1)
        if not c:
            if token:
                return token
            raise ImageFormatError("unexpected end of header")
        if c == b"#" and not token:
            f.readline()
            continue
        if c.isspace():
            if token:
                return token
            continue
        token += c


def _read_pfm_stream(f: BinaryIO) -> np.ndarray:
    magic = f.readline().strip()
    if magic == b"Pf":
        channels = 1
    elif magic == b"PF":
        channels = 3
    else:
        raise ImageFormatError(f"bad PFM magic {magic!r}")
    try:
        dims = f.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
    except (IndexError, ValueError) as exc:
        raise ImageFormatError("malformed PFM header") from exc
    if width <= 0 or height <= 0 or scale == 0.0:
        raise ImageFormatError("malformed PFM header")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    count = width * height * channels
    raw = f.read(count * 4)
    if len(raw) != count * 4:
        raise ImageFormatError("truncated PFM payload")
    data = np.frombuffer(raw, dtype=dtype).astype(np.float32)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.flipud(data.reshape(shape)).copy()


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    """Read a PFM file into a float32 array, top row first."""
    with open(path, "rb") as f:
        return _read_pfm_stream(f)


def _pfm_bytes(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim == 2:
        magic = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"PF"
    else:
        raise ImageFormatError(f"cannot store shape {image.shape} as PFM")
    height, width = image.shape[:2]
    header = magic + b"\n" + f"{width} {height}\n".encode() + b"-1.0\n"
    payload = np.ascontiguousarray(np.flipud(image), dtype="<f4").tobytes()
    return header + payload


def write_pfm(path: str | os.PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(_pfm_bytes(image))


def read_pfm_stack(path: str | os.PathLike) -> np.ndarray:
    """Read concatenated single-channel PFM images as a (N, H, W) array."""
    planes = []
    with open(path, "rb") as f:
        while True:
            pos = f.tell()
            if not f.read(1):
                break
            f.seek(pos)
            planes.append(_read_pfm_stream(f))
    if not planes:
        raise ImageFormatError("empty PFM stack")
    return np.stack(planes)


def write_pfm_stack(path: str | os.PathLike, volume: np.ndarray) -> None:
    with open(path, "wb") as f:
        for channel in np.asarray(volume):
            f.write(_pfm_bytes(channel))


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        found = f.read(2)
        if found != magic:
            raise ImageFormatError(f"expected {magic!r}, got {found!r}")
        try:
            width = int(_read_token(f))
            height = int(_read_token(f))
            maxval = int(_read_token(f))
        except ValueError as exc:
            raise ImageFormatError("malformed netpbm header") from exc
        if maxval == 255:
            dtype = np.dtype("u1")
        elif maxval == 65535:
            dtype = np.dtype(">u2")
        else:
            raise ImageFormatError(f"unsupported maxval {maxval}")
        count = width * height * channels
        raw = f.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ImageFormatError("truncated netpbm payload")
    data = np.frombuffer(raw, dtype=dtype)
    data = data.astype(np.uint8 if maxval == 255 else np.uint16)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return data.reshape(shape)


def _write_netpbm(path, magic: bytes, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        maxval, dtype = 255, np.dtype("u1")
    elif image.dtype == np.uint16:
        maxval, dtype = 65535, np.dtype(">u2")
    else:
        raise ImageFormatError(f"netpbm needs uint8 or uint16, got {image.dtype}")
    height, width = image.shape[:2]
    header = magic + f"\n{width} {height}\n{maxval}\n".encode()
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(image, dtype=dtype).tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    if np.asarray(image).ndim != 2:
        raise ImageFormatError("PGM needs a 2-D array")
    _write_netpbm(path, b"P5", image)


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P6 image as an (H, W, 3) uint8 or uint16 array."""
    return _read_netpbm(path, b"P6", 3)


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError("PPM needs an (H, W, 3) array")
    _write_netpbm(path, b"P6", image)


def rgb_to_uint8(rgb_chw: np.ndarray) -> np.ndarray:
    """Quantize a 3xHxW float image in [0, 1] to HxWx3 uint8."""
    hwc = np.transpose(np.clip(rgb_chw, 0.0, 1.0), (1, 2, 0))
    return np.round(hwc * 255.0).astype(np.uint8)


def uint8_to_rgb(image: np.ndarray) -> np.ndarray:
    scale = 255.0 if image.dtype == np.uint8 else 65535.0
    return np.transpose(image.astype(np.float64) / scale, (2, 0, 1))

