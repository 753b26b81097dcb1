"""Binary PGM (P5) and PPM (P6) writers for attention maps and input frames."""

from __future__ import annotations

import numpy as np


def write_pgm(path, gray):
    """Write a 2-D array of uint8 gray levels as binary PGM, maxval 255."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(gray.tobytes())


def write_ppm(path, rgb):
    """Write a 3 x H x W array in [0, 1] as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"PPM needs a 3 x H x W array, got shape {rgb.shape}")
    img = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.transpose(1, 2, 0).tobytes())


def normalize_to_gray(arr):
    """Min-max scale to [0, 255]; a flat map is defined as all-zero."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi - lo <= 0:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.round((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)
