"""PNG input/output; images are float arrays in [0, 1] with an (H, W, C) layout."""

from pathlib import Path

import numpy as np
from PIL import Image


def read_png(path):
    """8-bit (or 16-bit) PNG -> float32 (H, W, C) in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr.astype(np.float32)


def _to_2d_or_rgb(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    return np.clip(img, 0.0, 1.0)


def write_png(path, img):
    """Write an image in [0, 1] as 8-bit grayscale or RGB (values are clipped)."""
    arr = np.round(_to_2d_or_rgb(img) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(Path(path))
    return Path(path)


def write_png16(path, img):
    arr = _to_2d_or_rgb(img)
    if arr.ndim != 2:
        raise ValueError("16-bit PNGs are grayscale only")
    Image.fromarray(np.round(arr * 65535.0).astype(np.uint16)).save(Path(path))
    return Path(path)


def read_image_dir(directory):
    """All ``*.png`` files in a directory, sorted by name, as ``(ids, images)``."""
    paths = sorted(Path(directory).glob("*.png"))
    return [p.stem for p in paths], [read_png(p) for p in paths]
