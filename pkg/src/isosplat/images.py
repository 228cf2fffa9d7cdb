"""8-bit RGB image IO and quantization helpers."""

from __future__ import annotations

import numpy as np
from PIL import Image


def quantize8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round to the 8-bit grid, returned as float64.

    Rounding is to nearest with ties to even, matching what a PNG write
    followed by a read would yield.
    """
    q = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0)
    return q / 255.0


def save_png(path: str, img: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB PNG."""
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {a.shape}")
    u8 = np.rint(np.clip(a.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    """Read a PNG as float64 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0
