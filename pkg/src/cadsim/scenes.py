"""Synthetic RGB-D test scenes (textures, fronto-parallel planes, layered squares)."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .psf import CameraConfig


def texture(shape, seed: int = 0, channels: int = 1, scales=(1.0, 2.0, 4.0)) -> np.ndarray:
    """Band-mixed random texture in roughly [0.1, 0.9], shape (H, W, C)."""
    rng = np.random.default_rng(seed)
    h, w = shape
    out = np.zeros((h, w, channels))
    for c in range(channels):
        acc = np.zeros((h, w))
        for s in scales:
            n = ndimage.gaussian_filter(rng.standard_normal((h, w)), s, mode="wrap")
            acc += n / (n.std() + 1e-12)
        acc = (acc - acc.min()) / (acc.max() - acc.min() + 1e-12)
        out[:, :, c] = 0.1 + 0.8 * acc
    return out


def fronto_parallel(shape, blur_px: float, camera: CameraConfig, seed: int = 0, channels: int = 1):
    """Textured plane at the depth whose signed blur is ``blur_px``; returns (intensity, depth)."""
    z = float(camera.depth_from_blur_px(blur_px))
    return texture(shape, seed, channels), np.full(shape, z)


def square_over_background(shape, camera: CameraConfig, fg_blur: float, bg_blur: float,
                           half_size: int, seed: int = 0, channels: int = 1):
    h, w = shape
    intensity = texture(shape, seed, channels)
    depth = np.full(shape, float(camera.depth_from_blur_px(bg_blur)))
    cy, cx = h // 2, w // 2
    depth[cy - half_size:cy + half_size, cx - half_size:cx + half_size] = float(camera.depth_from_blur_px(fg_blur))
    return intensity, depth


def random_layered(shape, camera: CameraConfig, seed: int = 0, channels: int = 1, n_shapes: int = 4):
    """Background plane plus a few random textured rectangles at random stack depths."""
    rng = np.random.default_rng(seed)
    h, w = shape
    blurs = camera.plane_blurs()
    intensity = texture(shape, seed, channels)
    depth = np.full(shape, float(camera.depth_from_blur_px(rng.choice(blurs))))
    for i in range(n_shapes):
        y0, x0 = rng.integers(0, h - h // 4), rng.integers(0, w - w // 4)
        dy, dx = rng.integers(h // 8, h // 2), rng.integers(w // 8, w // 2)
        depth[y0:y0 + dy, x0:x0 + dx] = float(camera.depth_from_blur_px(rng.choice(blurs)))
        intensity[y0:y0 + dy, x0:x0 + dx] = texture((h, w), seed + 1000 + i, channels)[y0:y0 + dy, x0:x0 + dx]
    return intensity, depth
