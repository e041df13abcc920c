"""File formats: PFM maps, PNG previews, PSF stack containers and run manifests.

PSF binary container (little-endian)::

    offset  size  field
    0       8     magic b"CADSPSF\\0"
    8       4     uint32 version (1)
    12      4     uint32 plane count P
    16      4     uint32 kernel extent E
    20      4     uint32 flags (bit 0: coded)
    24      8*P   float64 signed blur per plane (px)
    ...     8*P*E*E  float64 left kernels, plane-major, row-major
    ...     8*P*E*E  float64 right kernels
"""
from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .psf import PsfStack

PSF_MAGIC = b"CADSPSF\0"
PSF_VERSION = 1
FORMAT_VERSION = "1"


def write_pfm(path, data) -> Path:
    """Write a 1- or 3-channel float map as little-endian PFM (bottom-to-top rows)."""
    path = Path(path)
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValidationError(f"PFM supports HxW or HxWx3 arrays, got {data.shape}")
    h, w = data.shape[:2]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(data)).astype("<f4").tobytes())
    return path


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ValidationError(f"{path} is not a PFM file")
        dims = f.readline()
        while dims.startswith(b"#"):
            dims = f.readline()
        w, h = map(int, dims.split())
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if tag == b"PF" else 1
        buf = f.read(w * h * ch * 4)
    if len(buf) != w * h * ch * 4:
        raise ValidationError(f"{path}: truncated PFM data")
    arr = np.frombuffer(buf, dtype=dtype).reshape(h, w, ch) if ch == 3 else \
        np.frombuffer(buf, dtype=dtype).reshape(h, w)
    return np.flipud(arr).astype(np.float64)


def write_png(path, img, bits: int = 8, vmax: float | None = None) -> Path:
    """Save a preview PNG, linearly scaling [0, vmax] to the full integer range."""
    from PIL import Image

    path = Path(path)
    img = np.asarray(img, dtype=float)
    vmax = float(img.max()) if vmax is None else float(vmax)
    top = 255 if bits == 8 else 65535
    scaled = np.clip(img / vmax, 0, 1) * top if vmax > 0 else np.zeros_like(img)
    path.parent.mkdir(parents=True, exist_ok=True)
    if bits == 8:
        arr = np.round(scaled).astype(np.uint8)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        Image.fromarray(arr).save(path)
    elif bits == 16:
        if img.ndim != 2:
            raise ValidationError("16-bit PNG output is grayscale only")
        Image.fromarray(np.round(scaled).astype(np.uint16)).save(path)
    else:
        raise ValidationError("bits must be 8 or 16")
    return path


def read_image(path) -> np.ndarray:
    """Read an intensity image as float in [0, 1] (PFM is returned as stored)."""
    from PIL import Image

    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    if path.suffix.lower() == ".npy":
        return np.load(path)
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            return np.asarray(im, dtype=float) / 65535.0
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=float) / 255.0


def colormap_preview(path, values, vmin: float, vmax: float) -> Path:
    from matplotlib import colormaps

    v = np.clip((np.asarray(values, dtype=float) - vmin) / max(vmax - vmin, 1e-12), 0, 1)
    v = np.nan_to_num(v, nan=0.0, posinf=1.0, neginf=0.0)
    rgb = colormaps["viridis"](v)[..., :3]
    return write_png(path, rgb, bits=8, vmax=1.0)


# -- PSF stacks ---------------------------------------------------------------

def save_psf_binary(stack: PsfStack, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    P, E = stack.num_planes, stack.kernel_extent_px
    with open(path, "wb") as f:
        f.write(PSF_MAGIC)
        f.write(struct.pack("<IIII", PSF_VERSION, P, E, int(stack.coded)))
        f.write(stack.blurs.astype("<f8").tobytes())
        f.write(np.ascontiguousarray(stack.left).astype("<f8").tobytes())
        f.write(np.ascontiguousarray(stack.right).astype("<f8").tobytes())
    return path


def load_psf_binary(path) -> PsfStack:
    data = Path(path).read_bytes()
    if data[:8] != PSF_MAGIC:
        raise ValidationError(f"{path}: bad PSF container magic")
    version, P, E, flags = struct.unpack("<IIII", data[8:24])
    if version != PSF_VERSION:
        raise ValidationError(f"{path}: unsupported PSF container version {version}")
    n = P * E * E
    expect = 24 + 8 * (P + 2 * n)
    if len(data) != expect:
        raise ValidationError(f"{path}: expected {expect} bytes, found {len(data)}")
    off = 24
    blurs = np.frombuffer(data, "<f8", P, off)
    off += 8 * P
    left = np.frombuffer(data, "<f8", n, off).reshape(P, E, E)
    off += 8 * n
    right = np.frombuffer(data, "<f8", n, off).reshape(P, E, E)
    return PsfStack(blurs, left, right, coded=bool(flags & 1))


def save_psf_stack(stack: PsfStack, directory) -> Path:
    """Per-plane 16-bit PNGs, a text manifest and the exact binary container."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format_version={FORMAT_VERSION}",
        f"planes={stack.num_planes}",
        f"extent={stack.kernel_extent_px}",
        f"coded={int(stack.coded)}",
        f"mask_id={stack.mask_id}",
        "normalization=sum(left)+sum(right)=1 per naive plane",
        "binary=stack.bin",
        "# index signed_blur_px energy png_scale left_png right_png",
    ]
    for i, b in enumerate(stack.blurs):
        peak = max(stack.left[i].max(), stack.right[i].max())
        lname, rname = f"plane_{i:02d}_left.png", f"plane_{i:02d}_right.png"
        write_png(d / lname, stack.left[i], bits=16, vmax=peak)
        write_png(d / rname, stack.right[i], bits=16, vmax=peak)
        energy = stack.left[i].sum() + stack.right[i].sum()
        lines.append(f"{i} {float(b)!r} {float(energy)!r} {float(peak)!r} {lname} {rname}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    save_psf_binary(stack, d / "stack.bin")
    return d


def load_psf_stack(directory) -> PsfStack:
    d = Path(directory)
    if d.is_file():
        return load_psf_binary(d)
    if not (d / "stack.bin").exists():
        raise FileNotFoundError(f"no PSF stack found in {d}")
    stack = load_psf_binary(d / "stack.bin")
    if (d / "manifest.txt").exists():
        stack = replace(stack, mask_id=read_psf_manifest(d).get("mask_id", ""))
    return stack


def read_psf_manifest(directory) -> dict:
    meta, planes = {}, []
    for line in (Path(directory) / "manifest.txt").read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if re.match(r"^\d+ ", line):
            i, b, e, s, ln, rn = line.split()
            planes.append({"index": int(i), "blur": float(b), "energy": float(e),
                           "scale": float(s), "left": ln, "right": rn})
        elif "=" in line:
            k, v = line.split("=", 1)
            meta[k] = v
    meta["planes_table"] = planes
    return meta


# -- manifests ----------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        h.update(q.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(path, command: str, config: dict, inputs: dict | None = None,
                   extra: dict | None = None) -> Path:
    from . import __version__

    rec = {
        "command": command,
        "tool_version": __version__,
        "format_version": FORMAT_VERSION,
        "config": config,
        "inputs": {k: file_digest(v) for k, v in (inputs or {}).items() if v is not None},
    }
    if extra:
        rec.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rec, indent=2, sort_keys=True, default=str) + "\n")
    return path
