"""Procedural stand-in imagery for desk-scale experiments: bright arc
bands with tooth-like bumps over a dark background, loosely shaped like
the cropped dentoalveolar region. Purely synthetic; exists so training
and metric ordering can be exercised without any clinical data."""

import numpy as np

from .pipeline import RawImage


def arc_blob_image(size, rng) -> RawImage:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size * (0.5 + rng.uniform(-0.06, 0.06))
    cy = size * (0.30 + rng.uniform(-0.05, 0.05))
    curve = rng.uniform(0.55, 0.8)
    # parabolic arc band (the "jaw line")
    arc_y = cy + curve * (xx - cx) ** 2 / size
    band = np.exp(-((yy - arc_y) / (size * rng.uniform(0.07, 0.10))) ** 2)
    img = 30.0 + 140.0 * band
    # blobs riding the arc (the "teeth")
    n_blobs = rng.integers(6, 10)
    for i in range(n_blobs):
        bx = cx + (i - (n_blobs - 1) / 2) * size * 0.09 + rng.uniform(-1.5, 1.5)
        by = cy + curve * (bx - cx) ** 2 / size + rng.uniform(-1.0, 1.0)
        r = size * rng.uniform(0.025, 0.04)
        img += 70.0 * np.exp(-(((xx - bx) ** 2 + (yy - by) ** 2) / (2 * r * r)))
    img += rng.normal(0.0, 6.0, size=(size, size))
    return RawImage(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8))


def make_arc_dataset(count, size=32, seed=0):
    """Stack of ``count`` procedural images as (N, H, W) uint8."""
    rng = np.random.default_rng(seed)
    return np.stack([arc_blob_image(size, rng).pixels for _ in range(count)])
