"""Portable pixmap output: grayscale slices and mask-contour overlays.

PGM (P5) and PPM (P6) are written raw with maxval 255, so the files are a
fixed header plus the pixel buffer and compare byte-for-byte across runs.

Overlays dim the display slice into all three channels, then paint the
predicted mask contour into red and the ground-truth contour into green;
where both agree the contour renders yellow.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

BASE_MAX = 160  # headroom so contours stand out over the dimmed slice


def write_pgm(path, gray: np.ndarray) -> Path:
    """Write one grayscale uint8 image (H, W) as binary PGM."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"PGM wants uint8 (H, W), got {gray.dtype} {gray.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + gray.tobytes())
    return path


def write_ppm(path, rgb: np.ndarray) -> Path:
    """Write one color uint8 image (H, W, 3) as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM wants uint8 (H, W, 3), got {rgb.dtype} {rgb.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + rgb.tobytes())
    return path


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels of a binary mask (4-neighborhood erosion residue)."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    eroded = m.copy()
    eroded[1:, :] &= m[:-1, :]
    eroded[:-1, :] &= m[1:, :]
    eroded[:, 1:] &= m[:, :-1]
    eroded[:, :-1] &= m[:, 1:]
    # image-border pixels of the mask are boundary by definition
    eroded[0, :] = eroded[-1, :] = False
    eroded[:, 0] = eroded[:, -1] = False
    return m & ~eroded


def overlay_rgb(display: np.ndarray, predicted_mask, truth_mask) -> np.ndarray:
    """Compose the dimmed slice with prediction (red) and truth (green) contours."""
    display = np.asarray(display, dtype=np.float64)
    if display.ndim != 2:
        raise ValueError(f"display slice must be 2D, got shape {display.shape}")
    base = np.clip(display, 0.0, 1.0) * BASE_MAX
    rgb = np.repeat(base[:, :, None], 3, axis=2).astype(np.uint8)
    pred_c = mask_contour(np.asarray(predicted_mask))
    true_c = mask_contour(np.asarray(truth_mask))
    rgb[pred_c, 0] = 255
    rgb[true_c, 1] = 255
    return rgb
