"""Depth, affine-invariant, image-quality metrics and the training loss."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .errors import ValidationError
from .mask import mask_regularizer


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 1.0
    beta2: float = 0.5
    beta3: float = 1.0
    beta4: float = 0.5
    beta5: float = 1e3

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(f"{k} must be finite and non-negative, got {v}")


def _same_shape(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def depth_metrics(pred, gt, delta_threshold: float = 1.05) -> dict:
    """RMSE (square-rooted), MAE and the delta-1 accuracy ratio."""
    pred, gt = _same_shape(pred, gt)
    err = pred - gt
    if np.any(gt <= 0):
        raise ValidationError("delta accuracy needs positive ground-truth depths")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(pred > 0, np.maximum(pred / gt, gt / pred), np.inf)
    return {
        "rmse_mm": float(np.sqrt(np.mean(err**2))),
        "mae_mm": float(np.mean(np.abs(err))),
        "delta1": float(np.mean(ratio < delta_threshold)),
    }


def _design(x):
    return np.stack([x, np.ones_like(x)], axis=1)


def l2_affine_fit(pred, gt):
    """(p, q) minimizing mean (gt - (p*pred + q))^2; p = 0 for constant pred."""
    x, y = np.ravel(pred), np.ravel(gt)
    if np.ptp(x) == 0:
        return 0.0, float(y.mean())
    (p, q), *_ = np.linalg.lstsq(_design(x), y, rcond=None)
    return float(p), float(q)


def l1_affine_fit(pred, gt, tol: float = 1e-8, max_iter: int = 100):
    """(p, q) minimizing mean |gt - (p*pred + q)| by iteratively reweighted least squares."""
    x, y = np.ravel(pred), np.ravel(gt)
    if np.ptp(x) == 0:
        return 0.0, float(np.median(y))
    A = _design(x)
    p, q = l2_affine_fit(x, y)
    best = (np.mean(np.abs(y - p * x - q)), p, q)
    eps = 1e-12 * max(1.0, np.abs(y).max())
    for _ in range(max_iter):
        r = np.abs(y - p * x - q)
        w = 1.0 / np.maximum(r, eps)
        sw = np.sqrt(w)
        (pn, qn), *_ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
        obj = np.mean(np.abs(y - pn * x - qn))
        if obj < best[0]:
            best = (obj, pn, qn)
        done = abs(pn - p) + abs(qn - q) <= tol * (1 + abs(p) + abs(q))
        p, q = pn, qn
        if done:
            break
    return float(best[1]), float(best[2])


def affine_invariant_metrics(pred, gt) -> dict:
    pred, gt = _same_shape(pred, gt)
    x, y = pred.ravel(), gt.ravel()
    degenerate = np.ptp(x) == 0
    if degenerate:
        warnings.warn("constant prediction: affine fit degenerate, using p = 0", RuntimeWarning)
    p2, q2 = l2_affine_fit(x, y)
    p1, q1 = l1_affine_fit(x, y)
    ai1 = float(np.mean(np.abs(y - (p1 * x + q1))))
    ai2 = float(np.sqrt(np.mean((y - (p2 * x + q2)) ** 2)))
    if degenerate or np.ptp(y) == 0:
        rho = 0.0
    else:
        rho = float(stats.spearmanr(x, y).statistic)
    return {"ai1": ai1, "ai2": ai2, "one_minus_abs_spearman": 1.0 - abs(rho), "degenerate": bool(degenerate)}


def psnr(pred, gt, peak: float = 1.0) -> float:
    pred, gt = _same_shape(pred, gt)
    if not peak > 0:
        raise ValidationError("peak must be positive")
    mse = np.mean((pred - gt) ** 2)
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(peak**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x**2 / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _valid_filter(img, w):
    from scipy.signal import correlate2d
    return correlate2d(img, w, mode="valid")


def ssim(pred, gt, peak: float = 1.0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over every fully contained Gaussian window, averaged over channels."""
    pred, gt = _same_shape(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[:, :, None], gt[:, :, None]
    if min(pred.shape[:2]) < window:
        raise ValidationError(f"images smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    vals = []
    for c in range(pred.shape[2]):
        x, y = pred[:, :, c], gt[:, :, c]
        mx, my = _valid_filter(x, w), _valid_filter(y, w)
        sxx = _valid_filter(x * x, w) - mx**2
        syy = _valid_filter(y * y, w) - my**2
        sxy = _valid_filter(x * y, w) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def image_metrics(pred, gt, peak: float = 1.0) -> dict:
    return {"psnr_db": psnr(pred, gt, peak), "ssim": ssim(pred, gt, peak)}


def forward_gradient(img):
    """Forward differences along rows and columns, zero at the last row/column."""
    img = np.asarray(img, dtype=float)
    gy = np.zeros_like(img)
    gx = np.zeros_like(img)
    gy[:-1] = img[1:] - img[:-1]
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    return gy, gx


def _l1_with_gradient(pred, gt, w_val, w_grad):
    pred, gt = _same_shape(pred, gt)
    val = np.mean(np.abs(pred - gt))
    py, px = forward_gradient(pred)
    gy, gx = forward_gradient(gt)
    grad = 0.5 * (np.mean(np.abs(py - gy)) + np.mean(np.abs(px - gx)))
    return w_val * val + w_grad * grad


def training_loss(pred_aif, gt_aif, pred_defocus, gt_defocus, mask, w: LossWeights | None = None) -> dict:
    """AIF and defocus L1 + gradient-L1 terms plus the transmission hinge."""
    w = w or LossWeights()
    l_aif = _l1_with_gradient(pred_aif, gt_aif, w.beta1, w.beta2)
    l_def = _l1_with_gradient(pred_defocus, gt_defocus, w.beta3, w.beta4)
    l_mask = mask_regularizer(mask, w.beta5) if w.beta5 > 0 else 0.0
    return {"total": float(l_aif + l_def + l_mask), "l_aif": float(l_aif),
            "l_defocus": float(l_def), "l_mask": float(l_mask)}
