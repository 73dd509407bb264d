"""Portable graymap (P5, maxval 255) export for visual inspection of
TD maps and attention maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InputError


def write_pgm(path, img: np.ndarray, lo: float | None = None,
              hi: float | None = None, flip_vertical: bool = False) -> None:
    """Write a 2-D array as an 8-bit graymap, scaling [lo, hi] -> [0, 255].

    Defaults to the array's own range; a constant array renders black.
    flip_vertical puts row 0 at the bottom (positive Doppler up).
    """
    if img.ndim != 2:
        raise InputError(f"PGM export needs a 2-D array, got shape {img.shape}")
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    span = hi - lo
    scaled = np.zeros_like(img, dtype=np.float64) if span <= 0 else \
        np.clip((img - lo) / span, 0.0, 1.0)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    if flip_vertical:
        pixels = pixels[::-1]
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Minimal P5 reader (used by tests)."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise InputError(f"{path}: not a P5 graymap")
    parts = blob.split(b"\n", 3)
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=width * height).reshape(height, width)
