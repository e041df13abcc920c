"""Coded-aperture dual-pixel imaging: PSFs, rendering, reconstruction, metrics, mask design."""

__version__ = "0.1.0"

from .mask import MaskPattern, binarize, builtin_mask, mask_from_params, mask_regularizer, transmission
from .psf import CameraConfig, DpPsfModelParams, PsfStack, code_psf_stack, generate_psf_stack, mtf
from .render import DualPixelCapture, MpiScene, build_mpi, render_occlusion_aware, render_simple

__all__ = [
    "CameraConfig", "DpPsfModelParams", "PsfStack", "MaskPattern", "MpiScene",
    "DualPixelCapture", "generate_psf_stack", "code_psf_stack", "mtf", "mask_from_params",
    "binarize", "transmission", "mask_regularizer", "builtin_mask", "build_mpi",
    "render_simple", "render_occlusion_aware",
]
