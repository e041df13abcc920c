"""Dataset-level evaluation and the aperture-code conditioning check."""
from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .mask import MaskPattern, mask_regularizer, transmission
from .metrics import affine_invariant_metrics, depth_metrics, image_metrics
from .psf import CameraConfig, DpPsfModelParams, code_psf_stack, generate_psf_stack, midband_mtf
from .recon import cost_margin, defocus_cost_volume
from .render import DualPixelCapture, build_mpi, render_simple
from .scenes import fronto_parallel

CHECK_BLURS = (-32.0, -16.0, -8.0, 8.0, 16.0, 32.0)


def scene_record(name: str, pred_depth=None, gt_depth=None, pred_defocus=None, gt_defocus=None,
                 pred_aif=None, gt_aif=None, peak: float = 1.0) -> dict:
    """One report line; fields are present when the corresponding pair is given."""
    rec = {"name": name}
    if pred_depth is not None:
        rec.update(depth_metrics(pred_depth, gt_depth))
    if pred_defocus is not None:
        ai = affine_invariant_metrics(pred_defocus, gt_defocus)
        rec.update({"ai1": ai["ai1"], "ai2": ai["ai2"], "spearman": ai["one_minus_abs_spearman"]})
    if pred_aif is not None:
        rec.update(image_metrics(pred_aif, gt_aif, peak))
    return rec


def aggregate(records) -> dict:
    """Mean of every numeric field over the records (PSNR +inf propagates)."""
    records = list(records)
    if not records:
        raise ValidationError("no records to aggregate")
    keys = [k for k in records[0] if k != "name"]
    out = {"name": "aggregate", "count": len(records)}
    for k in keys:
        vals = [r[k] for r in records if k in r]
        out[k] = float(np.mean(vals))
    return out


def _normalized_margin(stack, camera, blur, shape, seed, border):
    intensity, depth = fronto_parallel(shape, blur, camera, seed=seed)
    cap = render_simple(build_mpi(intensity, depth, camera, stack), stack)
    mu = cap.combined.mean()
    cap = DualPixelCapture(cap.left / mu, cap.right / mu)
    region = np.zeros(shape, dtype=bool)
    region[border:-border, border:-border] = True
    return cost_margin(defocus_cost_volume(cap, stack), region)


def conditioning_report(stack, camera, blurs=CHECK_BLURS, shape=(112, 112), seed=5, border=40) -> dict:
    """Mid-band MTF of the +max plane (mean over views) and mean best-vs-second cost margin.

    Captures are divided by their mean combined intensity first, so codes
    passing less light are compared at equal exposure.
    """
    i = stack.num_planes - 1
    mtf = 0.5 * (midband_mtf(stack.left[i]) + midband_mtf(stack.right[i]))
    margins = [_normalized_margin(stack, camera, b, shape, seed, border) for b in blurs]
    return {"midband_mtf": float(mtf), "margin": float(np.mean(margins))}


def mask_check(mask: MaskPattern, camera: CameraConfig | None = None, model: DpPsfModelParams | None = None,
               **kw) -> dict:
    """Transmission constraint plus the coded-vs-naive conditioning comparison."""
    camera = camera or CameraConfig()
    naive = generate_psf_stack(camera, model)
    coded = code_psf_stack(naive, mask)
    n = conditioning_report(naive, camera, **kw)
    c = conditioning_report(coded, camera, **kw)
    T = transmission(mask)
    return {
        "mask_id": mask.digest(),
        "transmission": float(T),
        "regularizer": float(mask_regularizer(mask)),
        "transmission_ok": bool(T >= 0.5),
        "midband_mtf_coded": c["midband_mtf"],
        "midband_mtf_naive": n["midband_mtf"],
        "margin_coded": c["margin"],
        "margin_naive": n["margin"],
        "conditioning_ok": bool(c["midband_mtf"] >= n["midband_mtf"] and c["margin"] >= n["margin"]),
    }
