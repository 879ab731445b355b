"""Raster file I/O.

Color PNGs are stored sRGB-encoded and held in memory as linear floats in
[0, 1]. Masks are PNGs without any transfer function. Float rasters (depth)
use little-endian PFM with bottom-to-top row order.
"""

from __future__ import annotations

import os

import cv2
import numpy as np

from .errors import FormatError, InvalidArgument


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, x * 12.92, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def _read_raw_png(path) -> np.ndarray:
    img = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"cannot read image {path}")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FormatError(f"unsupported PNG sample type {img.dtype} in {path}")
    if img.ndim == 3:
        if img.shape[2] == 3:
            img = img[:, :, ::-1]
        elif img.shape[2] == 4:
            img = img[:, :, [2, 1, 0, 3]]
    return img.astype(np.float64) / scale


def _encode(img: np.ndarray, bits: int) -> np.ndarray:
    if bits not in (8, 16):
        raise InvalidArgument("PNG bit depth must be 8 or 16")
    maxval = 255.0 if bits == 8 else 65535.0
    q = np.round(np.clip(img, 0.0, 1.0) * maxval).astype(np.uint8 if bits == 8 else np.uint16)
    if q.ndim == 3:
        if q.shape[2] == 3:
            q = q[:, :, ::-1]
        elif q.shape[2] == 4:
            q = q[:, :, [2, 1, 0, 3]]
    return np.ascontiguousarray(q)


def read_encoded(path) -> np.ndarray:
    """Stored sample values scaled to [0, 1], without any transfer function."""
    return _read_raw_png(path)


def read_color(path) -> np.ndarray:
    """Load a color PNG as a linear float (H, W, C) array; alpha stays linear."""
    img = _read_raw_png(path)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    out = img.copy()
    out[..., :3] = srgb_to_linear(img[..., :3])
    return out


def write_color(path, img: np.ndarray, bits: int = 8) -> None:
    img = np.asarray(img, dtype=np.float64)
    enc = img.copy()
    enc[..., :3] = linear_to_srgb(img[..., :3])
    if not cv2.imwrite(os.fspath(path), _encode(enc, bits)):
        raise FormatError(f"cannot write {path}")


def encode_color_png(img: np.ndarray, bits: int = 8) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    enc = img.copy()
    enc[..., :3] = linear_to_srgb(img[..., :3])
    ok, buf = cv2.imencode(".png", _encode(enc, bits))
    if not ok:
        raise FormatError("PNG encoding failed")
    return buf.tobytes()


def decode_color_png(data: bytes) -> np.ndarray:
    img = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError("cannot decode embedded PNG")
    scale = 255.0 if img.dtype == np.uint8 else 65535.0
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    elif img.shape[2] == 3:
        img = img[:, :, ::-1]
    else:
        img = img[:, :, [2, 1, 0, 3]]
    out = img.astype(np.float64) / scale
    out[..., :3] = srgb_to_linear(out[..., :3])
    return out


def read_mask(path) -> np.ndarray:
    """Load a mask PNG as soft weights in [0, 1]; color masks use their first channel."""
    img = _read_raw_png(path)
    if img.ndim == 3:
        img = img[..., 0]
    return img


def write_mask(path, mask: np.ndarray, bits: int = 8) -> None:
    if not cv2.imwrite(os.fspath(path), _encode(np.asarray(mask, np.float64), bits)):
        raise FormatError(f"cannot write {path}")


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise InvalidArgument("PFM holds 1 or 3 channels")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(data)).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise FormatError(f"{path}: not a PFM file")
    channels = 3 if parts[0] == b"PF" else 1
    try:
        w, h = (int(t) for t in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    payload = parts[3]
    if len(payload) < 4 * count:
        raise FormatError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(payload[: 4 * count], dtype=dtype).astype(np.float32)
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))
    return np.flipud(arr).copy()


def read_depth(path):
    """Load a PFM depth raster; returns (depth float64, validity bool)."""
    d = read_pfm(path).astype(np.float64)
    if d.ndim == 3:
        d = d[..., 0]
    valid = np.isfinite(d) & (d > 0)
    return np.where(valid, d, 0.0), valid


def write_depth(path, depth: np.ndarray, valid: np.ndarray | None = None) -> None:
    d = np.asarray(depth, np.float64)
    if valid is not None:
        d = np.where(valid, d, 0.0)
    write_pfm(path, d)
