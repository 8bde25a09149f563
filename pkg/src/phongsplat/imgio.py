"""PNG and PFM helpers. Images are float64 linear RGB in [0, 1] in memory."""

from __future__ import annotations

import os

import cv2
import numpy as np


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.asarray(c, dtype=np.float64)
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1 / 2.4) - 0.055)


def read_png(path: str, srgb: bool = False) -> np.ndarray:
    """Decode an 8- or 16-bit PNG to (H, W, 3) float64 in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"unreadable image: {path}")
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    raw = raw[:, :, ::-1]  # BGR -> RGB
    if raw.dtype == np.uint8:
        img = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        img = raw.astype(np.float64) / 65535.0
    else:
        raise IOError(f"unsupported PNG sample type {raw.dtype}: {path}")
    return srgb_to_linear(img) if srgb else img


def write_png(path: str, img: np.ndarray, bits: int = 8, srgb: bool = False) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if srgb:
        img = linear_to_srgb(img)
    img = np.clip(img, 0.0, 1.0)
    if bits == 8:
        raw = np.round(img * 255.0).astype(np.uint8)
    elif bits == 16:
        raw = np.round(img * 65535.0).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if not cv2.imwrite(str(path), raw[:, :, ::-1]):
        raise IOError(f"failed to write {path}")


def write_pfm(path: str, data: np.ndarray) -> None:
    """Single-channel PFM, little-endian, rows bottom-up per the format."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("PFM writer expects a 2-D map")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).tobytes())


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise IOError(f"not a grayscale PFM: {path}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
    return np.flipud(data.reshape(h, w)).astype(np.float64)
