"""Procedural toy images standing in for SVHN-scale data at desk scale.

Each image is a flat background with one antialiased ellipse or rectangle.
"""

import numpy as np


def toy_image(rng, size=32, channels=1, supersample=4):
    n = size * supersample
    coords = (np.arange(n) + 0.5) / supersample
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
    ry, rx = rng.uniform(0.12 * size, 0.35 * size, size=2)
    if rng.random() < 0.5:
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:
        mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    cover = mask.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    bg = rng.uniform(0.0, 0.3, size=channels)
    fg = rng.uniform(0.6, 1.0, size=channels)
    img = bg + cover[..., None] * (fg - bg)
    return img.astype(np.float32)


def toy_images(count, size=32, channels=1, seed=0):
    """``count`` images of shape ``(size, size, channels)``; image ``j`` uses stream ``(seed, j)``."""
    return np.stack([toy_image(np.random.default_rng([seed, j]), size, channels) for j in range(count)])
