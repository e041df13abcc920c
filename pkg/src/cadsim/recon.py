"""Classical coded dual-pixel reconstruction: cross-blur cost volume, depth, Wiener AIF.

For a fronto-parallel patch at plane k the two views are I_L = hL_k * s and
I_R = hR_k * s, so I_L * hR_k == I_R * hL_k. The matching cost of plane k is
the windowed squared difference of these two cross-blurred images.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal
from scipy.sparse.linalg import LinearOperator, cg

from .errors import DegenerateInputError, NumericalError, ValidationError
from .psf import CameraConfig, PsfStack
from .render import DualPixelCapture, trim_kernel, convolve_same

# Wiener regularizer relative to DC power; suits clean to mildly noisy captures
DEFAULT_REG = 3e-3


@dataclass(frozen=True, eq=False)
class CostVolume:
    costs: np.ndarray       # (P, H, W)
    tie_tol: float = 0.0


@dataclass(frozen=True, eq=False)
class DefocusMap:
    normalized: np.ndarray  # (H, W) in [-1, 1]
    max_blur_px: float
    pixel_pitch_um: float

    @property
    def blur_px(self) -> np.ndarray:
        return self.normalized * self.max_blur_px

    @property
    def blur_mm(self) -> np.ndarray:
        return self.blur_px * self.pixel_pitch_um * 1e-3


def cross_blur(capture: DualPixelCapture, stack: PsfStack, k: int):
    L, R = capture.left, capture.right
    a = np.stack([convolve_same(L[:, :, c], stack.right[k]) for c in range(L.shape[2])], axis=2)
    b = np.stack([convolve_same(R[:, :, c], stack.left[k]) for c in range(R.shape[2])], axis=2)
    return a, b


def defocus_cost_volume(capture: DualPixelCapture, stack: PsfStack, patch_radius: int = 4) -> CostVolume:
    """Windowed SSD between cross-blurred views, one slice per plane.

    Each slice is divided by (sum(hL_k)^2 + sum(hR_k)^2) / 2 so planes whose
    coded kernels pass little light are not favoured; planes with no light
    get an infinite cost.
    """
    if patch_radius < 1:
        raise ValidationError(f"patch_radius must be >= 1, got {patch_radius}")
    win = 2 * patch_radius + 1
    sl = stack.left.sum(axis=(1, 2))
    sr = stack.right.sum(axis=(1, 2))
    scale = 0.5 * (sl**2 + sr**2)
    costs = []
    for k in range(stack.num_planes):
        if not scale[k] > 0:
            costs.append(np.full(capture.left.shape[:2], np.inf))
            continue
        a, b = cross_blur(capture, stack, k)
        d2 = ((a - b) ** 2).sum(axis=2)
        costs.append(ndimage.uniform_filter(d2, size=win, mode="constant") * win * win / scale[k])
    peak = max(float(np.abs(capture.left).max()), float(np.abs(capture.right).max()), 1e-300)
    tol = 1e-12 * win * win * capture.left.shape[2] * peak**2
    return CostVolume(np.stack(costs), tol)


def _parabola_offset(cm, c0, cp, tol):
    with np.errstate(invalid="ignore"):
        denom = cm - 2 * c0 + cp
        ok = np.isfinite(cm) & np.isfinite(cp) & (denom > tol)
    off = np.where(ok, 0.5 * (np.where(ok, cm - cp, 0.0)) / np.where(ok, denom, 1.0), 0.0)
    return np.clip(off, -0.5, 0.5)


def estimate_defocus(costs: CostVolume, stack: PsfStack, pixel_pitch_um: float = float("nan")) -> DefocusMap:
    """Per-pixel argmin over planes, ties broken toward the smallest |blur|,
    refined by a three-point parabola along the plane axis."""
    c = costs.costs
    P = c.shape[0]
    cmin = c.min(axis=0)
    tied = c <= cmin[None] + costs.tie_tol
    # rank planes by |blur| so the first tied entry is the one nearest focus
    order = np.argsort(np.abs(stack.blurs), kind="stable")
    first = np.argmax(tied[order], axis=0)
    k = order[first]

    blurs = stack.blurs
    kk = np.clip(k, 1, P - 2)
    rows, cols = np.indices(k.shape)
    cm = c[kk - 1, rows, cols]
    c0 = c[kk, rows, cols]
    cp = c[kk + 1, rows, cols]
    interior = (k > 0) & (k < P - 1)
    off = np.where(interior, _parabola_offset(cm, c0, cp, costs.tie_tol), 0.0)
    step = np.where(off > 0, blurs[np.clip(k + 1, 0, P - 1)] - blurs[k],
                    blurs[k] - blurs[np.clip(k - 1, 0, P - 1)])
    blur = blurs[k] + off * step
    D = stack.max_blur_px
    return DefocusMap(np.clip(blur / D, -1.0, 1.0), D, pixel_pitch_um)


def defocus_to_depth(dmap: DefocusMap, camera: CameraConfig) -> np.ndarray:
    """Invert the thin-lens defocus relation; +inf where the blur reaches the far asymptote."""
    pitch = dmap.pixel_pitch_um if np.isfinite(dmap.pixel_pitch_um) else camera.pixel_pitch_um
    blur_mm = dmap.normalized * dmap.max_blur_px * pitch * 1e-3
    return camera.depth_from_blur_mm(blur_mm)


def depth_to_defocus(depth_mm, camera: CameraConfig) -> DefocusMap:
    blur = camera.blur_px(depth_mm)
    return DefocusMap(np.clip(blur / camera.max_blur_px, -1, 1), camera.max_blur_px, camera.pixel_pitch_um)


def wiener_filter(kernel: np.ndarray, shape, reg: float) -> np.ndarray:
    """Frequency response of the DC-normalized Wiener filter for ``kernel`` on ``shape``.

    W = conj(H) / (|H|^2 + lam) * (H0^2 + lam) / H0^2, lam = reg * H0^2,
    so a delta kernel passes through exactly and the DC gain is 1/H0.
    """
    E = kernel.shape[0]
    pad = np.zeros(shape)
    pad[:E, :E] = kernel
    pad = np.roll(pad, (-(E // 2), -(E // 2)), axis=(0, 1))
    H = np.fft.fft2(pad)
    H0 = kernel.sum()
    lam = reg * H0**2
    return np.conj(H) / (np.abs(H) ** 2 + lam) * (H0**2 + lam) / H0**2


def _deconvolve_periodic(Y, h, reg):
    H, W = Y.shape
    p = h.shape[0] // 2
    Yp = np.pad(Y, p, mode="reflect" if min(H, W) > p else "edge")
    X = np.real(np.fft.ifft2(np.fft.fft2(Yp) * wiener_filter(h, Yp.shape, reg)))
    return X[p:p + H, p:p + W]


def _deconvolve_exact(Y, h, reg, rtol=1e-8, maxiter=500):
    """Regularized deconvolution with the linear (non-circular) blur operator.

    Solves (A^T A + lam I) x = A^T y by conjugate gradients, where A blurs an
    image extended by the kernel radius and keeps the valid part. The
    periodic Wiener filter preconditions the solve. The result gets the same
    (H0^2 + lam) / H0^2 scaling as ``wiener_filter``.
    """
    H, W = Y.shape
    p = h.shape[0] // 2
    Hp, Wp = H + 2 * p, W + 2 * p
    h0 = h.sum()
    lam = reg * h0**2
    hf = h[::-1, ::-1]

    def normal(v):
        x = v.reshape(Hp, Wp)
        return (signal.fftconvolve(signal.fftconvolve(x, h, "valid"), hf, "full") + lam * x).ravel()

    pad = np.zeros((Hp, Wp))
    pad[:h.shape[0], :h.shape[1]] = h
    Hf = np.fft.fft2(np.roll(pad, (-p, -p), axis=(0, 1)))
    denom = np.abs(Hf) ** 2 + lam

    def precond(v):
        return np.real(np.fft.ifft2(np.fft.fft2(v.reshape(Hp, Wp)) / denom)).ravel()

    n = Hp * Wp
    rhs = signal.fftconvolve(Y, hf, "full").ravel()
    x, info = cg(LinearOperator((n, n), normal), rhs, M=LinearOperator((n, n), precond),
                 rtol=rtol, maxiter=maxiter)
    if info < 0:
        raise NumericalError("deconvolution solver failed")
    return x.reshape(Hp, Wp)[p:p + H, p:p + W] * (h0**2 + lam) / h0**2


def deconvolve(Y: np.ndarray, kernel: np.ndarray, reg: float = DEFAULT_REG, method: str = "exact") -> np.ndarray:
    """Deconvolve a single-channel image by one kernel (DC gain 1/sum(kernel))."""
    h = trim_kernel(kernel)
    h0 = h.sum()
    if not h0 > 0:
        raise DegenerateInputError("kernel has no energy")
    if h.shape[0] == 1:
        return Y / h0
    if method == "exact":
        return _deconvolve_exact(Y, h, reg)
    if method == "periodic":
        return _deconvolve_periodic(Y, h, reg)
    raise ValidationError(f"unknown deconvolution method {method!r}")


def deblur_aif(capture: DualPixelCapture, dmap: DefocusMap, stack: PsfStack, reg: float = DEFAULT_REG,
               method: str = "exact") -> np.ndarray:
    """Per-plane deconvolution of I_L + I_R by hL + hR, composited by nearest plane.

    Output is clamped to [0, max(I_L + I_R) / sum(kernel)] per plane.
    """
    if not reg > 0:
        raise ValidationError(f"reg must be positive, got {reg}")
    Y = capture.combined
    planes = stack.nearest_plane(dmap.blur_px)
    ymax = float(Y.max())
    out = np.zeros_like(Y)
    combined = stack.combined()
    for k in np.unique(planes):
        h = combined[k]
        h0 = h.sum()
        if h0 <= 0:
            continue
        sel = planes == k
        for c in range(Y.shape[2]):
            X = deconvolve(Y[:, :, c], h, reg, method)
            out[:, :, c][sel] = np.clip(X[sel], 0.0, ymax / h0)
    return out


@dataclass(frozen=True, eq=False)
class Reconstruction:
    defocus: DefocusMap
    depth_mm: np.ndarray
    aif: np.ndarray
    costs: CostVolume


def reconstruct(capture: DualPixelCapture, stack: PsfStack, camera: CameraConfig,
                patch_radius: int = 4, reg: float = DEFAULT_REG, method: str = "exact") -> Reconstruction:
    cv = defocus_cost_volume(capture, stack, patch_radius)
    d = estimate_defocus(cv, stack, camera.pixel_pitch_um)
    return Reconstruction(d, defocus_to_depth(d, camera), deblur_aif(capture, d, stack, reg, method), cv)


def cost_margin(costs: CostVolume, region=None) -> float:
    """Mean gap between the best and second-best plane cost per pixel."""
    c = np.sort(costs.costs, axis=0)
    gap = c[1] - c[0]
    if region is not None:
        gap = gap[region]
    return float(gap.mean())
