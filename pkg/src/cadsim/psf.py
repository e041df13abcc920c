"""Dual-pixel PSF generation, aperture coding and PSF analysis.

Signed blur convention: positive blur means the scene point lies behind the
focal plane (z > g), negative means in front of it. Blur sizes are circle of
confusion diameters in pixels.
"""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, SizingError, StateError, ValidationError
from .mask import aperture_disc


@dataclass(frozen=True)
class CameraConfig:
    focal_length_mm: float = 50.0
    aperture_diameter_mm: float = 12.5
    focus_distance_mm: float = 400.0
    pixel_pitch_um: float = 10.72
    num_planes: int = 21
    max_blur_px: float = 40.0

    def __post_init__(self):
        for name in ("focal_length_mm", "aperture_diameter_mm", "focus_distance_mm",
                     "pixel_pitch_um", "max_blur_px"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be positive and finite, got {v}")
        if self.focus_distance_mm <= self.focal_length_mm:
            raise ValidationError(
                "focus distance g must exceed focal length f so that the defocus "
                f"scale L*f/(1 - f/g) is finite and positive (g={self.focus_distance_mm}, "
                f"f={self.focal_length_mm})")
        if int(self.num_planes) != self.num_planes or self.num_planes < 3 or self.num_planes % 2 == 0:
            raise ValidationError(f"num_planes must be an odd integer >= 3, got {self.num_planes}")

    @property
    def pixel_pitch_mm(self) -> float:
        return self.pixel_pitch_um * 1e-3

    @property
    def defocus_scale_mm2(self) -> float:
        """L f / (1 - f/g), the factor multiplying (1/g - 1/z)."""
        f, g = self.focal_length_mm, self.focus_distance_mm
        return self.aperture_diameter_mm * f / (1.0 - f / g)

    @property
    def kernel_extent(self) -> int:
        return kernel_extent_for(self.max_blur_px)

    def plane_blurs(self) -> np.ndarray:
        return np.linspace(-self.max_blur_px, self.max_blur_px, self.num_planes)

    def blur_mm(self, depth_mm):
        depth_mm = np.asarray(depth_mm, dtype=float)
        return self.defocus_scale_mm2 * (1.0 / self.focus_distance_mm - 1.0 / depth_mm)

    def blur_px(self, depth_mm):
        return self.blur_mm(depth_mm) / self.pixel_pitch_mm

    def depth_from_blur_mm(self, blur_mm):
        """Inverse of ``blur_mm``; returns +inf at or beyond the far-field asymptote."""
        blur_mm = np.asarray(blur_mm, dtype=float)
        inv = 1.0 / self.focus_distance_mm - blur_mm / self.defocus_scale_mm2
        with np.errstate(divide="ignore"):
            z = np.where(inv > 0, 1.0 / np.where(inv > 0, inv, 1.0), np.inf)
        return z

    def depth_from_blur_px(self, blur_px):
        return self.depth_from_blur_mm(np.asarray(blur_px, dtype=float) * self.pixel_pitch_mm)

    def plane_depths(self) -> np.ndarray:
        return self.depth_from_blur_px(self.plane_blurs())


@dataclass(frozen=True)
class DpPsfModelParams:
    """Knobs of the Butterworth dual-pixel PSF model (order 1, 2.5, 0.4, 7)."""
    filter_order: int = 1
    shape_alpha: float = 2.5
    shape_beta: float = 0.4
    smoothing_strength: int = 7

    def __post_init__(self):
        if int(self.filter_order) != self.filter_order or self.filter_order < 1:
            raise ValidationError("filter_order must be a positive integer")
        for name in ("shape_alpha", "shape_beta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be positive and finite, got {v}")
        s = self.smoothing_strength
        if int(s) != s or s < 1 or s % 2 == 0:
            raise ValidationError("smoothing_strength must be a positive odd integer")


def kernel_extent_for(blur_px: float) -> int:
    return 2 * math.ceil(abs(blur_px) / 2) + 1


def _gaussian_taps(size: int) -> np.ndarray:
    # OpenCV's sigma rule for a given odd aperture size
    sigma = 0.3 * ((size - 1) * 0.5 - 1) + 0.8
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x**2 / (2 * sigma**2))
    return g / g.sum()


def _left_profile(blur_px: float, model: DpPsfModelParams) -> np.ndarray:
    """Unnormalized left-view kernel for a positive blur on its own support box."""
    k = kernel_extent_for(blur_px)
    r = abs(blur_px) / 2
    c = (k - 1) / 2
    y, x = np.mgrid[0:k, 0:k] - c
    rr = x**2 + y**2
    disc = (rr <= r**2 + 1e-9).astype(float)

    cutoff = (k - 1) / model.shape_alpha
    t = (rr / cutoff**2) ** model.filter_order
    bw = t / (1.0 + t)  # high-pass Butterworth
    span = bw.max() - bw.min()
    bw = (1.0 - model.shape_beta) * (bw - bw.min()) / span + model.shape_beta if span > 0 else np.ones_like(bw)

    size_g = int(round(k / model.smoothing_strength)) + 1
    if size_g % 2 == 0:
        size_g += 1
    pad = size_g // 2
    taps = _gaussian_taps(size_g)
    prof = np.pad(disc * bw, pad)
    prof = ndimage.convolve1d(prof, taps, axis=0, mode="constant")
    prof = ndimage.convolve1d(prof, taps, axis=1, mode="constant")
    prof = prof[pad:pad + k, pad:pad + k] * disc

    # linear light fall-off across the lens halves; leakage floor comes from the padding
    ramp = (x[0] + c + pad) / (k - 1 + 2 * pad)
    return prof * ramp[None, :]


def naive_dp_psf(blur_px: float, side: str, model: DpPsfModelParams | None = None,
                 extent: int | None = None) -> np.ndarray:
    model = model or DpPsfModelParams()
    if not np.isfinite(blur_px):
        raise ValidationError(f"blur must be finite, got {blur_px}")
    if side not in ("left", "right"):
        raise ValidationError(f"side must be 'left' or 'right', got {side!r}")
    need = kernel_extent_for(blur_px)
    extent = need if extent is None else int(extent)
    if extent < need or extent % 2 == 0:
        raise SizingError(f"blur {blur_px} px needs an odd kernel extent >= {need}, got {extent}")

    out = np.zeros((extent, extent))
    if blur_px == 0:
        out[extent // 2, extent // 2] = 0.5
        return out

    left = _left_profile(blur_px, model)
    left /= 2.0 * left.sum()
    if blur_px < 0:
        left = left[:, ::-1]
    ker = left if side == "left" else left[:, ::-1]
    o = (extent - need) // 2
    out[o:o + need, o:o + need] = ker
    return out


@dataclass(frozen=True, eq=False)
class PsfStack:
    blurs: np.ndarray    # (P,) signed blur per plane, px
    left: np.ndarray     # (P, E, E)
    right: np.ndarray    # (P, E, E)
    coded: bool = False
    mask_id: str = field(default="", compare=False)

    def __post_init__(self):
        blurs = np.array(self.blurs, dtype=float)
        left = np.array(self.left, dtype=float)
        right = np.array(self.right, dtype=float)
        if left.shape != right.shape or left.ndim != 3 or left.shape[0] != blurs.size:
            raise ValidationError("left/right kernels must be (P, E, E) arrays matching the blur list")
        if left.shape[1] != left.shape[2] or left.shape[1] % 2 == 0:
            raise ValidationError("kernel extent must be odd and square")
        if np.any(np.diff(blurs) <= 0):
            raise ValidationError("plane blurs must be strictly increasing")
        for arr in (blurs, left, right):
            arr.flags.writeable = False
        object.__setattr__(self, "blurs", blurs)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @property
    def num_planes(self) -> int:
        return self.blurs.size

    @property
    def kernel_extent_px(self) -> int:
        return self.left.shape[1]

    @property
    def max_blur_px(self) -> float:
        return float(np.abs(self.blurs).max())

    @property
    def zero_plane(self) -> int:
        return int(np.argmin(np.abs(self.blurs)))

    def plane_energy(self) -> np.ndarray:
        return self.left.sum(axis=(1, 2)) + self.right.sum(axis=(1, 2))

    def combined(self) -> np.ndarray:
        return self.left + self.right

    def nearest_plane(self, blur_px):
        """Index of the plane with signed blur nearest to ``blur_px`` (ties to the lower index)."""
        blur_px = np.asarray(blur_px, dtype=float)
        return np.argmin(np.abs(blur_px[..., None] - self.blurs), axis=-1)


def generate_psf_stack(camera: CameraConfig | None = None,
                       model: DpPsfModelParams | None = None) -> PsfStack:
    camera = camera or CameraConfig()
    model = model or DpPsfModelParams()
    blurs = camera.plane_blurs()
    blurs[camera.num_planes // 2] = 0.0
    E = camera.kernel_extent
    left = np.stack([naive_dp_psf(b, "left", model, E) for b in blurs])
    right = left[:, :, ::-1].copy()
    return PsfStack(blurs, left, right, coded=False)


@lru_cache(maxsize=256)
def _aperture_sample_index(n_mask: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Source mask cell for each pixel of a ``size`` x ``size`` blur support.

    Nearest-neighbour resampling restricted to cells inside the circular
    aperture: pixels whose nearest cell falls outside the aperture take the
    nearest cell that lies inside it, so an open aperture always maps to 1.
    """
    inside = np.argwhere(aperture_disc(n_mask) > 0).astype(float)
    pos = (np.arange(size) + 0.5) * n_mask / size - 0.5
    py, px = np.meshgrid(pos, pos, indexing="ij")
    d2 = (py.reshape(-1, 1) - inside[:, 0])**2 + (px.reshape(-1, 1) - inside[:, 1])**2
    src = inside[np.argmin(d2, axis=1)].astype(int)
    iy = src[:, 0].reshape(size, size)
    ix = src[:, 1].reshape(size, size)
    iy.flags.writeable = False
    ix.flags.writeable = False
    return iy, ix


def resize_to_support(grid: np.ndarray, size: int) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ValidationError(f"mask grid must be square, got shape {grid.shape}")
    iy, ix = _aperture_sample_index(grid.shape[0], size)
    return grid[iy, ix]


def flip_for_blur(grid: np.ndarray, blur_px: float) -> np.ndarray:
    return grid[::-1, ::-1] if blur_px > 0 else grid


def mask_multiplier(grid: np.ndarray, blur_px: float, extent: int) -> np.ndarray:
    """Mask transmission over an ``extent`` x ``extent`` kernel for one plane.

    The mask is flipped on both axes for positive defocus, resized to the
    blur support and placed at the kernel centre; zero outside the support.
    """
    grid = flip_for_blur(np.asarray(grid, dtype=float), blur_px)
    k = kernel_extent_for(blur_px)
    out = np.zeros((extent, extent))
    o = (extent - k) // 2
    out[o:o + k, o:o + k] = resize_to_support(grid, k)
    return out


def code_psf_stack(stack: PsfStack, mask) -> PsfStack:
    if stack.coded:
        raise StateError("stack is already coded; code the naive stack instead")
    grid = getattr(mask, "grid", mask)
    E = stack.kernel_extent_px
    mult = np.stack([mask_multiplier(grid, b, E) for b in stack.blurs])
    mask_id = getattr(mask, "digest", lambda: "")()
    return PsfStack(stack.blurs, mult * stack.left, mult * stack.right, coded=True, mask_id=mask_id)


def mtf(kernel: np.ndarray, pad_to: int | None = None) -> np.ndarray:
    """DC-normalized DFT modulus of a kernel (zero frequency at index [0, 0])."""
    kernel = np.asarray(kernel, dtype=float)
    total = kernel.sum()
    if not total > 0:
        raise DegenerateInputError("kernel has no energy")
    shape = None if pad_to is None else (pad_to, pad_to)
    return np.abs(np.fft.fft2(kernel, s=shape)) / total


def radial_frequency(n: int) -> np.ndarray:
    f = np.fft.fftfreq(n)
    return np.hypot(f[:, None], f[None, :])


def midband_mask(n: int, band=(0.1, 0.3)) -> np.ndarray:
    rf = radial_frequency(n)
    return (rf >= band[0]) & (rf <= band[1])


def midband_mtf(kernel: np.ndarray, band=(0.1, 0.3), pad_to: int | None = None) -> float:
    m = mtf(kernel, pad_to)
    return float(m[midband_mask(m.shape[0], band)].mean())


def _centroid_x(k: np.ndarray) -> float:
    total = k.sum()
    if not total > 0:
        raise DegenerateInputError("kernel has no energy")
    x = np.arange(k.shape[1]) - (k.shape[1] - 1) / 2
    return float((k.sum(axis=0) * x).sum() / total)


def psf_centroid_disparity(stack: PsfStack, plane_index: int) -> float:
    if not 0 <= plane_index < stack.num_planes:
        raise ValidationError(f"plane index {plane_index} out of range")
    return _centroid_x(stack.left[plane_index]) - _centroid_x(stack.right[plane_index])
