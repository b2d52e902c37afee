"""
ITU-R BT.601 full-range colour conversion on [0, 1] float images.

Chroma planes are offset by 0.5 so that every plane stays in [0, 1].
"""

from typing import Tuple

import numpy as np

from models.exceptions import ShapeError

KR, KG, KB = 0.299, 0.587, 0.114
CB_SCALE = 2.0 * (1.0 - KB)  # 1.772
CR_SCALE = 2.0 * (1.0 - KR)  # 1.402


def rgb_to_ycbcr(image: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Split an RGB image into Y, Cb, Cr planes

    Args:
        image: H x W x 3 array with values in [0, 1]

    Returns:
        (Y, Cb, Cr) planes, each H x W, Y in [0, 1]
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"Expected an H x W x 3 image, got shape {image.shape}")

    rgb = image.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = KR * r + KG * g + KB * b
    cb = 0.5 + (b - y) / CB_SCALE
    cr = 0.5 + (r - y) / CR_SCALE
    return np.clip(y, 0.0, 1.0), cb, cr


def ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    """
    Stack Y, Cb, Cr planes back into an RGB image clipped to [0, 1]

    Args:
        y, cb, cr: equal-shape H x W planes

    Returns:
        H x W x 3 RGB array
    """
    if not (y.shape == cb.shape == cr.shape) or y.ndim != 2:
        raise ShapeError(f"Plane shapes differ or are not 2-D: {y.shape}, {cb.shape}, {cr.shape}")

    y = y.astype(np.float64)
    r = y + CR_SCALE * (cr - 0.5)
    b = y + CB_SCALE * (cb - 0.5)
    g = (y - KR * r - KB * b) / KG
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)
