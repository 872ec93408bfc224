"""Grayscale PNG I/O, bilinear resizing, and the result overlay.

Images travel through the package as float arrays in [0, 1] unless a
function says otherwise; files on disk are 8-bit PNGs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError, FormatError, ParameterError


def read_png_gray(path) -> np.ndarray:
    """Load an 8-bit grayscale PNG as float32 in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise FormatError(f"{path}: expected 8-bit grayscale, got mode '{img.mode}'")
            data = np.asarray(img, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except FormatError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types for bad files
        raise FormatError(f"{path}: not a readable PNG ({exc})") from exc
    return data.astype(np.float32) / 255.0


def write_png_gray(path, image: np.ndarray) -> None:
    """Write a (H, W) array as 8-bit grayscale; floats are taken as [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise DimensionError(f"grayscale image must be 2-d, got {image.shape}")
    if image.dtype != np.uint8:
        image = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="L").save(path)


def write_png_rgb(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DimensionError(f"RGB image must be (H, W, 3) uint8, got {image.shape} {image.dtype}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="RGB").save(path)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (H, W) float array, align-corners style.

    Output pixel centers map linearly onto input pixel centers, with the
    first and last centers coinciding, matching the sampling convention
    used by the warping code.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError(f"resize expects a 2-d image, got {image.shape}")
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = image.shape
    src_y = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.array([(h - 1) / 2.0])
    src_x = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.array([(w - 1) / 2.0])
    return sample_bilinear(image, *np.meshgrid(src_x, src_y))


def sample_bilinear(image: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Evaluate a (H, W) array at fractional pixel coordinates.

    Coordinates are clamped to the image, so this is meant for sampling
    points already inside it (resizing, cropping); the warping code has
    its own zero-padded sampler.
    """
    h, w = image.shape
    px = np.clip(px, 0.0, w - 1.0)
    py = np.clip(py, 0.0, h - 1.0)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = px - x0
    fy = py - y0
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


FIXED_COLOR = np.array([255, 70, 70], dtype=np.uint8)
WARPED_COLOR = np.array([70, 220, 70], dtype=np.uint8)
BOTH_COLOR = np.array([255, 235, 60], dtype=np.uint8)


def overlay_masks(fixed_mask: np.ndarray, warped_mask: np.ndarray,
                  threshold: float = 0.5) -> np.ndarray:
    """RGB overlay: fixed-only red, warped-only green, agreement yellow."""
    f = np.asarray(fixed_mask) >= threshold
    m = np.asarray(warped_mask) >= threshold
    if f.shape != m.shape:
        raise DimensionError(f"mask shapes differ: {f.shape} vs {m.shape}")
    out = np.zeros(f.shape + (3,), dtype=np.uint8)
    out[f & ~m] = FIXED_COLOR
    out[m & ~f] = WARPED_COLOR
    out[f & m] = BOTH_COLOR
    return out
