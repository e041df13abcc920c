"""Multiplane scene decomposition and dual-pixel capture rendering.

Layer k of a scene holds the pixels assigned to stack plane k. Stack planes
are sorted by signed blur and signed blur grows with distance, so plane 0
(most negative blur) is the nearest and occludes every later plane.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from .errors import ValidationError
from .psf import CameraConfig, PsfStack

ENERGY_EPS = 1e-8
# kernels with a trimmed support at or below this side length use direct convolution
DIRECT_MAX_SUPPORT = 7


@dataclass(frozen=True, eq=False)
class MpiScene:
    intensity: np.ndarray     # (K, H, W, C)
    alpha: np.ndarray         # (K, H, W), binary partition
    plane_index: np.ndarray   # (H, W)
    clamped_pixels: int = 0

    @property
    def num_layers(self) -> int:
        return self.alpha.shape[0]

    @property
    def shape(self):
        return self.intensity.shape[1:]

    def occupied(self) -> np.ndarray:
        return np.flatnonzero(self.alpha.reshape(self.num_layers, -1).any(axis=1))

    def composite(self) -> np.ndarray:
        return self.intensity.sum(axis=0)


@dataclass(frozen=True, eq=False)
class DualPixelCapture:
    left: np.ndarray    # (H, W, C)
    right: np.ndarray
    noise_params: tuple | None = None   # (a, b, seed)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValidationError("left and right views must share shape")

    @property
    def combined(self) -> np.ndarray:
        return self.left + self.right


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValidationError(f"intensity must be HxW, HxWx1 or HxWx3, got {img.shape}")
    return img


def scene_from_labels(intensity, labels, num_layers: int, clamped: int = 0) -> MpiScene:
    intensity = _as_hwc(intensity)
    labels = np.asarray(labels, dtype=int)
    if labels.shape != intensity.shape[:2]:
        raise ValidationError("label map and intensity must share HxW")
    if labels.min() < 0 or labels.max() >= num_layers:
        raise ValidationError("layer label out of range")
    alpha = (labels[None] == np.arange(num_layers)[:, None, None]).astype(float)
    return MpiScene(alpha[..., None] * intensity[None], alpha, labels, clamped)


def build_mpi(intensity, depth_map, camera: CameraConfig, stack: PsfStack) -> MpiScene:
    """Quantize a depth map (mm) to the stack planes by nearest signed blur.

    Depths whose blur falls outside the stack range are clamped to the end
    planes; their count is kept in ``clamped_pixels``.
    """
    depth = np.asarray(depth_map, dtype=float)
    if np.any(~np.isfinite(depth)) or np.any(depth <= 0):
        raise ValidationError("depth map must be positive and finite")
    blur = camera.blur_px(depth)
    lim = stack.max_blur_px
    clamped = int(np.count_nonzero(np.abs(blur) > lim))
    idx = stack.nearest_plane(np.clip(blur, -lim, lim))
    return scene_from_labels(intensity, idx, stack.num_planes, clamped)


def trim_kernel(kernel: np.ndarray) -> np.ndarray:
    """Centered odd crop containing every nonzero tap."""
    nz = np.argwhere(kernel != 0)
    if nz.size == 0:
        return kernel[:1, :1] * 0
    c = kernel.shape[0] // 2
    r = int(np.abs(nz - c).max())
    return kernel[c - r:c + r + 1, c - r:c + r + 1]


def convolve_same(img: np.ndarray, kernel: np.ndarray, method: str = "auto") -> np.ndarray:
    """Zero-padded 2D convolution cropped to the input size."""
    k = trim_kernel(kernel)
    if method == "auto":
        method = "direct" if k.shape[0] <= DIRECT_MAX_SUPPORT else "fft"
    if method == "direct":
        return signal.convolve2d(img, k, mode="same", boundary="fill")
    if method == "fft":
        return signal.fftconvolve(img, k, mode="same")
    raise ValidationError(f"unknown convolution method {method!r}")


def _conv_hwc(img, kernel, method="auto"):
    return np.stack([convolve_same(img[:, :, c], kernel, method) for c in range(img.shape[2])], axis=2)


def _check(scene: MpiScene, stack: PsfStack):
    if scene.num_layers != stack.num_planes:
        raise ValidationError(
            f"scene has {scene.num_layers} layers but stack has {stack.num_planes} planes")


def render_simple(scene: MpiScene, stack: PsfStack, method: str = "auto") -> DualPixelCapture:
    """Linear layered render: sum over layers of kernel * layer intensity."""
    _check(scene, stack)
    out = {}
    for side, kernels in (("left", stack.left), ("right", stack.right)):
        acc = np.zeros(scene.shape)
        for k in scene.occupied():
            acc += _conv_hwc(scene.intensity[k], kernels[k], method)
        out[side] = acc
    return DualPixelCapture(out["left"], out["right"], meta={"renderer": "simple"})


def preprocess_alphas(scene: MpiScene) -> np.ndarray:
    """Soften binary layer alphas at layer boundaries.

    Each alpha is dilated with a 3x3 max filter. Where more than one dilated
    layer claims a pixel (a seam), every layer is averaged with its nearer
    neighbour (index k - 1); elsewhere the binary alpha is kept. Per-pixel
    sums are renormalized to 1.
    """
    alpha = scene.alpha
    pooled = np.stack([ndimage.maximum_filter(a, size=3, mode="nearest") for a in alpha])
    seam = pooled.sum(axis=0) > 1
    nearer = np.concatenate([np.zeros_like(pooled[:1]), pooled[:-1]])
    blended = 0.5 * (pooled + nearer)
    out = np.where(seam[None], blended, alpha)
    return out / out.sum(axis=0, keepdims=True)


def _render_view(scene, kernels, alphas, method):
    acc = np.zeros(scene.shape)
    cum = np.zeros(scene.shape[:2])
    # back to front: farthest plane (last index) first
    for k in range(scene.num_layers - 1, -1, -1):
        cum = cum + alphas[k]
        a_any = alphas[k].any()
        s_any = scene.alpha[k].any()
        if not (a_any or s_any):
            continue
        h = kernels[k]
        total = h.sum()
        if total <= 0:
            continue
        hn = h / total
        E = convolve_same(cum, hn, method)
        valid = E >= ENERGY_EPS
        Esafe = np.where(valid, E, 1.0)
        if a_any:
            A = convolve_same(alphas[k], hn, method)
            factor = np.clip(np.where(valid, 1.0 - A / Esafe, 1.0), 0.0, 1.0)
            acc = acc * factor[:, :, None]
        if s_any:
            B = _conv_hwc(scene.intensity[k], h, method)
            acc = acc + np.where(valid[:, :, None], B / Esafe[:, :, None], 0.0)
    return acc


def render_occlusion_aware(scene: MpiScene, stack: PsfStack, method: str = "auto",
                           alphas: np.ndarray | None = None) -> DualPixelCapture:
    """Back-to-front normalized compositing of blurred layers.

    Each layer's blurred intensity is divided by the blurred cumulative alpha
    of itself and every farther layer (kernel normalized to unit sum, so the
    divisor is a coverage fraction) and attenuated by every nearer layer's
    blurred coverage. Where the coverage is below ENERGY_EPS the term is dropped.
    """
    _check(scene, stack)
    if alphas is None:
        alphas = preprocess_alphas(scene)
    left = _render_view(scene, stack.left, alphas, method)
    right = _render_view(scene, stack.right, alphas, method)
    return DualPixelCapture(left, right, meta={"renderer": "occlusion_aware"})


def add_noise(capture: DualPixelCapture, a: float, b: float, seed: int) -> DualPixelCapture:
    """Heteroscedastic Gaussian noise with variance a*x + b, clamped at zero."""
    if a < 0 or b < 0:
        raise ValidationError(f"noise parameters must be non-negative, got a={a}, b={b}")
    if a == 0 and b == 0:
        return DualPixelCapture(capture.left, capture.right, (a, b, seed), dict(capture.meta))
    rng = np.random.default_rng(seed)
    views = []
    for x in (capture.left, capture.right):
        std = np.sqrt(a * np.clip(x, 0, None) + b)
        views.append(np.clip(x + std * rng.standard_normal(x.shape), 0, None))
    return DualPixelCapture(views[0], views[1], (a, b, seed), dict(capture.meta))


def sample_stack_index(n: int, seed: int) -> int:
    if n < 1:
        raise ValidationError("need at least one PSF stack")
    return int(np.random.default_rng(seed).integers(n))


def render_with_psf_sampling(scene: MpiScene, stacks, seed: int, method: str = "auto") -> DualPixelCapture:
    """Render with one PSF stack drawn uniformly at random (e.g. from a field-of-view grid)."""
    stacks = list(stacks)
    if not stacks:
        raise ValidationError("need at least one PSF stack")
    shapes = {(s.num_planes, s.kernel_extent_px) for s in stacks}
    if len(shapes) != 1:
        raise ValidationError("all PSF stacks must share plane count and extent")
    i = sample_stack_index(len(stacks), seed)
    cap = render_occlusion_aware(scene, stacks[i], method)
    cap.meta["psf_index"] = i
    return cap
