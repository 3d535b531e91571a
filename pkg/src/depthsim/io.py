"""File formats: portable float maps, 16-bit depth PNGs, pixmaps and CSV tables."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import InputError

__all__ = ["write_pfm", "read_pfm", "write_depth_png", "read_depth_png", "read_image",
           "write_image", "write_csv", "read_csv", "write_weights", "read_weights"]


def write_pfm(path, image: np.ndarray) -> None:
    """Write a 32-bit little-endian portable float map.

    Rows are stored bottom-to-top as the format requires; a 2-D array is
    written as greyscale (``Pf``), an HxWx3 array as colour (``PF``).
    """
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise InputError(f"PFM needs HxW or HxWx3 data, got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.ascontiguousarray(a[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise InputError(f"{path}: not a PFM file")
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise InputError(f"{path}: malformed PFM header") from exc
    ch = 3 if parts[0] == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(parts[3], dtype=dtype, count=w * h * ch)
    a = a.reshape((h, w, ch) if ch == 3 else (h, w))[::-1]
    return a.astype(np.float64)


def write_depth_png(path, depth_mm: np.ndarray, valid: np.ndarray | None = None) -> None:
    """16-bit unsigned millimetre depth; 0 marks invalid pixels."""
    d = np.asarray(depth_mm, dtype=float)
    mask = np.isfinite(d) if valid is None else (np.asarray(valid, bool) & np.isfinite(d))
    out = np.where(mask, np.clip(np.rint(d), 0, 65535), 0).astype(np.uint16)
    Image.fromarray(out).save(path, format="PNG")


def read_depth_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64)


def read_image(path) -> np.ndarray:
    """Load an 8/16-bit grey or RGB image, scaled to [0, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: cannot read image ({exc})") from exc
    if img.mode not in ("L", "RGB", "I;16", "I"):
        img = img.convert("RGB")
    a = np.asarray(img, dtype=np.float64)
    peak = 255.0 if img.mode in ("L", "RGB") else 65535.0
    return a / peak


def write_image(path, values: np.ndarray) -> None:
    """Save values in [0, 1] as an 8-bit grey or RGB image (format from suffix)."""
    a = np.asarray(values, dtype=float)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    Image.fromarray(np.clip(np.rint(a * 255), 0, 255).astype(np.uint8)).save(path)


def write_csv(path, header: list[str], rows) -> None:
    """CSV with a fixed header; floats use ``repr`` so values round-trip exactly."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty CSV")
    return rows[0], rows[1:]


_MAGIC = b"DSCV"
_VERSION = 1


def write_weights(path, arrays: dict[str, np.ndarray]) -> None:
    """Persist named float arrays.

    Layout (little-endian): magic ``DSCV``, u32 version, u32 count, then per
    array: u32 name length, UTF-8 name, u32 ndim, ndim x u32 shape, float64
    data in C order.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def read_weights(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise InputError(f"{path}: not a weight file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise InputError(f"{path}: unsupported weight file version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(data, "<f8", size, pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise InputError(f"{path}: truncated weight file") from exc
    return out
