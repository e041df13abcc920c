"""Aperture codes: sigmoid-temperature parameterization, transmission, built-ins."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import max_len_seq

from .errors import ValidationError

DEFAULT_MASK_SIZE = 21


@lru_cache(maxsize=64)
def aperture_disc(n: int) -> np.ndarray:
    """Inscribed circular aperture on an n x n grid (cells whose centre lies within n/2)."""
    c = (n - 1) / 2
    y, x = np.mgrid[0:n, 0:n] - c
    d = ((x**2 + y**2) <= (n / 2) ** 2 + 1e-9).astype(float)
    d.flags.writeable = False
    return d


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True, eq=False)
class MaskPattern:
    grid: np.ndarray
    latent_params: np.ndarray | None = None
    temperature: float = 0.0
    binary: bool = False

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise ValidationError(f"mask grid must be square 2D, got shape {grid.shape}")
        if not np.all(np.isfinite(grid)) or grid.min() < 0 or grid.max() > 1:
            raise ValidationError("mask grid values must lie in [0, 1]")
        if self.binary and not np.all((grid == 0) | (grid == 1)):
            raise ValidationError("binary mask must contain only 0 and 1")
        grid.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        if self.latent_params is not None:
            lat = np.array(self.latent_params, dtype=float)
            if lat.shape != grid.shape:
                raise ValidationError("latent params must match the grid shape")
            lat.flags.writeable = False
            object.__setattr__(self, "latent_params", lat)

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.grid, dtype="<f8").tobytes()).hexdigest()[:16]


def mask_from_params(latent, temperature: float) -> MaskPattern:
    latent = np.asarray(latent, dtype=float)
    if not np.all(np.isfinite(latent)):
        raise ValidationError("latent mask parameters must be finite")
    if not (np.isfinite(temperature) and temperature >= 0):
        raise ValidationError(f"temperature must be non-negative, got {temperature}")
    return MaskPattern(sigmoid(temperature * latent), latent, float(temperature), binary=False)


def binarize(mask: MaskPattern, threshold: float = 0.5) -> MaskPattern:
    # ties go to open
    return MaskPattern((mask.grid >= threshold).astype(float), None, mask.temperature, binary=True)


def transmission(mask) -> float:
    grid = np.asarray(getattr(mask, "grid", mask), dtype=float)
    return float(grid.sum() / aperture_disc(grid.shape[0]).sum())


def mask_regularizer(mask, beta5: float = 1e3) -> float:
    if not beta5 > 0:
        raise ValidationError("beta5 must be positive")
    return float(beta5 * max(0.0, 0.5 - transmission(mask)))


def open_latent(n: int = DEFAULT_MASK_SIZE, magnitude: float = 3.0) -> np.ndarray:
    """Latent init for an open aperture: +magnitude inside the disc, -magnitude outside."""
    return np.where(aperture_disc(n) > 0, magnitude, -magnitude)


def mls_sequence(length: int = 31) -> np.ndarray:
    nbits = int(round(np.log2(length + 1)))
    if 2**nbits - 1 != length:
        raise ValidationError(f"m-sequence length must be 2^n - 1, got {length}")
    seq, _ = max_len_seq(nbits)
    return seq.astype(float)


def _open(n):
    return MaskPattern(aperture_disc(n).copy(), binary=True)


def _open_half_area(n):
    """Centred near-circular opening with ceil(area / 2) cells: the cells nearest the
    centre, ties within a ring broken by angle so the count is exact."""
    c = (n - 1) / 2
    y, x = np.mgrid[0:n, 0:n] - c
    count = int(np.ceil(aperture_disc(n).sum() / 2))
    order = np.lexsort((np.arctan2(y, x).ravel(), (x**2 + y**2).ravel()))
    grid = np.zeros(n * n)
    grid[order[:count]] = 1.0
    return MaskPattern(grid.reshape(n, n), binary=True)


def _mls_separable(n, length=31):
    seq = mls_sequence(length)
    if n > seq.size:
        raise ValidationError(f"m-sequence of length {seq.size} is too short for a {n}x{n} mask")
    s = seq[:n]
    return MaskPattern(np.outer(s, s) * aperture_disc(n), binary=True)


def reference_mask_path() -> Path:
    return Path(__file__).parent / "data" / "reference_mask.png"


def builtin_mask(name: str, size: int = DEFAULT_MASK_SIZE, **kw) -> MaskPattern:
    """Built-in aperture codes: open, open_half_area, mls_separable, reference, or an image path."""
    if name == "open":
        return _open(size)
    if name == "open_half_area":
        return _open_half_area(size)
    if name == "mls_separable":
        return _mls_separable(size, kw.get("mls_length", 31))
    if name == "reference":
        return load_mask(reference_mask_path())
    if name.startswith("file:"):
        return load_mask(name[5:])
    if Path(name).suffix.lower() in (".png", ".bmp", ".tif", ".tiff", ".pgm"):
        return load_mask(name)
    raise ValidationError(f"unknown mask {name!r}")


def load_mask(path) -> MaskPattern:
    """Load an 8-bit grayscale mask image (white = transparent), thresholded at 0.5.

    A sidecar ``<path>.txt`` written by :func:`save_mask` is read if present.
    """
    from PIL import Image

    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=float) / 255.0
    except (OSError, ValueError) as e:
        raise OSError(f"cannot read mask image {path}: {e}") from e
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
        raise ValidationError(f"mask image must be square, got {arr.shape}")
    temperature = 0.0
    side = path.with_name(path.name + ".txt")
    if side.exists():
        meta = dict(line.split("=", 1) for line in side.read_text().splitlines() if "=" in line)
        temperature = float(meta.get("temperature", 0.0))
    return MaskPattern((arr >= 0.5).astype(float), None, temperature, binary=True)


def save_mask(mask: MaskPattern, path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.round(mask.grid * 255), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)
    side = path.with_name(path.name + ".txt")
    side.write_text(
        f"temperature={mask.temperature!r}\n"
        f"binary={int(mask.binary)}\n"
        f"size={mask.size}\n"
        f"transmission={transmission(mask)!r}\n")
    if mask.latent_params is not None:
        np.save(path.with_name(path.stem + "_latent.npy"), mask.latent_params)
    return path
