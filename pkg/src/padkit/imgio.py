"""Image I/O helpers: float32 RGB arrays in [0,1] <-> 8-bit PNG files."""

from pathlib import Path

import cv2
import numpy as np


def to_float(image: np.ndarray) -> np.ndarray:
    """Convert an image array to float32 in [0,1]; uint8 is scaled by 255."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32, copy=False)


def to_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    return np.rint(arr * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> Path:
    """Write a float [0,1] RGB (or single-channel) image as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(image)
    if arr.ndim == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"failed to write PNG: {path}")
    return path


def load_png(path) -> np.ndarray:
    """Read a PNG as float32 RGB in [0,1]."""
    arr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if arr is None:
        raise FileNotFoundError(f"cannot read image: {path}")
    return to_float(cv2.cvtColor(arr, cv2.COLOR_BGR2RGB))
