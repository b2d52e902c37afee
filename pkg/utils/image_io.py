"""
Image file helpers: decode PNG/JPEG/BMP/TIFF into [0, 1] float arrays and back.
"""

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from models.exceptions import DatasetError

PathLike = Union[str, Path]
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def read_image(path: PathLike) -> np.ndarray:
    """
    Load an image as float64 in [0, 1]

    Returns:
        H x W array for single-channel files, H x W x 3 for colour files
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"Image not found: {path}")
    try:
        with Image.open(path) as img:
            if img.mode in ("I;16", "I;16B", "I;16L", "I"):
                return np.asarray(img, dtype=np.float64) / 65535.0
            if img.mode in ("L", "1", "LA"):
                return np.asarray(img.convert("L"), dtype=np.float64) / 255.0
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"Could not decode image {path}: {e}") from e


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: PathLike, image: np.ndarray) -> Path:
    """Write a [0, 1] gray (H x W) or RGB (H x W x 3) array as an 8-bit file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
    return path
