"""Command-line interface: gen-psf, render, recon, eval, optimize-mask.

Settings come from (lowest to highest priority) built-in defaults, an
optional ``--config`` key=value file and explicit flags. The resolved
settings are written into ``manifest.json`` in every output directory.

Exit codes: 0 success, 1 a requested check failed, 2 invalid input,
3 file error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__
from .errors import NumericalError, ValidationError
from .evaluate import aggregate, mask_check, scene_record
from .io import (colormap_preview, load_psf_stack, read_image, read_pfm, save_psf_stack, write_manifest,
                 write_pfm, write_png)
from .mask import MaskPattern, builtin_mask, save_mask
from .optimize import OptimizeConfig, config_dict, optimize_mask
from .psf import CameraConfig, DpPsfModelParams, code_psf_stack, generate_psf_stack, mtf
from .recon import DEFAULT_REG, cost_margin, reconstruct
from .render import DualPixelCapture, add_noise, build_mpi, render_occlusion_aware, render_simple
from .scenes import random_layered

log = logging.getLogger("cadsim")

EXIT_OK, EXIT_CHECK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3, 4
SCENE_FILES = ("depth.pfm", "defocus.pfm", "aif.pfm")


# -- shared option groups -------------------------------------------------------

def _add_camera(p):
    g = p.add_argument_group("camera")
    d = CameraConfig()
    g.add_argument("--focal-length-mm", type=float, default=d.focal_length_mm)
    g.add_argument("--aperture-mm", type=float, default=d.aperture_diameter_mm, help="aperture diameter L")
    g.add_argument("--focus-mm", type=float, default=d.focus_distance_mm, help="focus distance g")
    g.add_argument("--pixel-pitch-um", type=float, default=d.pixel_pitch_um)
    g.add_argument("--num-planes", type=int, default=d.num_planes)
    g.add_argument("--max-blur-px", type=float, default=d.max_blur_px)


def _camera(a) -> CameraConfig:
    return CameraConfig(a.focal_length_mm, a.aperture_mm, a.focus_mm, a.pixel_pitch_um,
                        a.num_planes, a.max_blur_px)


def _mask_arg(spec: str | None) -> MaskPattern | None:
    if spec in (None, "", "none", "naive"):
        return None
    return builtin_mask(spec)


def _resolved(a) -> dict:
    return {k: v for k, v in sorted(vars(a).items()) if k not in ("func", "config")}


def _check_stack_matches(stack, camera):
    if stack.num_planes != camera.num_planes or not np.allclose(stack.blurs, camera.plane_blurs()):
        raise ValidationError("PSF stack planes do not match the camera settings "
                              f"({stack.num_planes} planes, max blur {stack.max_blur_px})")


# -- commands -------------------------------------------------------------------

def cmd_gen_psf(a) -> int:
    camera = _camera(a)
    model = DpPsfModelParams(a.filter_order, a.shape_alpha, a.shape_beta, a.smoothing_strength)
    stack = generate_psf_stack(camera, model)
    mask = _mask_arg(a.mask)
    if mask is not None:
        stack = code_psf_stack(stack, mask)
    out = Path(a.out)
    save_psf_stack(stack, out)
    if mask is not None:
        save_mask(mask, out / "mask.png")
    _plot_mtf(stack, out / "mtf.png")
    write_manifest(out / "manifest.json", "gen-psf", _resolved(a),
                   {"mask": a.mask} if a.mask and Path(a.mask).is_file() else None,
                   {"mask_id": stack.mask_id, "blurs": stack.blurs.tolist()})
    print(f"wrote {stack.num_planes}-plane stack to {out}")
    return EXIT_OK


def _plot_mtf(stack, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    idx = sorted({0, stack.num_planes // 4, stack.num_planes - 1 - stack.num_planes // 4, stack.num_planes - 1})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i in idx:
        m = mtf(stack.combined()[i], pad_to=64)
        ax.plot(np.arange(33) / 64, m[0, :33], label=f"{stack.blurs[i]:+.0f} px")
    ax.set_xlabel("horizontal frequency (cycles/px)")
    ax.set_ylabel("MTF")
    ax.legend(fontsize=8)
    ax.set_title("coded" if stack.coded else "naive dual-pixel")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_render(a) -> int:
    camera = _camera(a)
    stack = load_psf_stack(a.stack)
    _check_stack_matches(stack, camera)
    intensity = read_image(a.intensity)
    depth = read_pfm(a.depth)
    if depth.ndim == 3:
        depth = depth[:, :, 0]
    if depth.shape != intensity.shape[:2]:
        raise ValidationError(f"depth {depth.shape} and intensity {intensity.shape[:2]} sizes differ")
    scene = build_mpi(intensity, depth, camera, stack)
    if scene.clamped_pixels:
        log.warning("%d depth pixels outside the stack range were clamped", scene.clamped_pixels)
    cap = render_occlusion_aware(scene, stack) if a.occlusion == "on" else render_simple(scene, stack)
    if a.noise_a > 0 or a.noise_b > 0:
        cap = add_noise(cap, a.noise_a, a.noise_b, a.seed)
    out = Path(a.out)
    write_pfm(out / "left.pfm", cap.left)
    write_pfm(out / "right.pfm", cap.right)
    write_png(out / "preview.png", cap.combined, bits=8, vmax=1.0)
    write_manifest(out / "manifest.json", "render", _resolved(a),
                   {"intensity": a.intensity, "depth": a.depth, "stack": Path(a.stack)},
                   {"mask_id": stack.mask_id, "clamped_pixels": scene.clamped_pixels,
                    "noise": [a.noise_a, a.noise_b, a.seed]})
    print(f"wrote capture to {out}")
    return EXIT_OK


def _read_capture(d) -> DualPixelCapture:
    d = Path(d)
    left, right = read_pfm(d / "left.pfm"), read_pfm(d / "right.pfm")
    if left.ndim == 2:
        left, right = left[:, :, None], right[:, :, None]
    return DualPixelCapture(left, right)


def cmd_recon(a) -> int:
    camera = _camera(a)
    stack = load_psf_stack(a.stack)
    _check_stack_matches(stack, camera)
    cap = _read_capture(a.capture)
    r = reconstruct(cap, stack, camera, a.patch_radius, a.reg, a.deconv)
    out = Path(a.out)
    write_pfm(out / "defocus.pfm", r.defocus.normalized)
    write_pfm(out / "depth.pfm", r.depth_mm)
    aif = r.aif[:, :, 0] if r.aif.shape[2] == 1 else r.aif
    write_pfm(out / "aif.pfm", aif)
    write_png(out / "aif.png", aif, bits=8, vmax=1.0)
    preview = r.depth_mm
    if a.median > 1:
        preview = ndimage.median_filter(preview, size=a.median, mode="nearest")
    lo, hi = camera.depth_from_blur_px(-camera.max_blur_px), camera.depth_from_blur_px(camera.max_blur_px)
    colormap_preview(out / "depth_preview.png", np.clip(preview, lo, hi), lo, hi)
    write_manifest(out / "manifest.json", "recon", _resolved(a),
                   {"capture": Path(a.capture), "stack": Path(a.stack)},
                   {"mask_id": stack.mask_id, "cost_margin": cost_margin(r.costs)})
    print(f"wrote reconstruction to {out}")
    return EXIT_OK


def _scene_dirs(root: Path) -> dict:
    if any((root / f).exists() for f in SCENE_FILES):
        return {root.name: root}
    dirs = {d.name: d for d in sorted(root.iterdir()) if d.is_dir()} if root.is_dir() else {}
    if not dirs:
        raise FileNotFoundError(f"no scenes found in {root}")
    return dirs


def _load(path):
    return read_pfm(path) if path.exists() else None


def cmd_eval(a) -> int:
    out = Path(a.out)
    if a.mask_check:
        mask = builtin_mask(a.mask_check)
        rep = mask_check(mask, _camera(a))
        out.mkdir(parents=True, exist_ok=True)
        (out / "mask_check.json").write_text(json.dumps(rep, indent=2) + "\n")
        write_manifest(out / "manifest.json", "eval", _resolved(a),
                       {"mask": a.mask_check} if Path(a.mask_check).is_file() else None)
        print(json.dumps(rep))
        return EXIT_OK if rep["transmission_ok"] else EXIT_CHECK
    if not (a.pred and a.gt):
        raise ValidationError("eval needs --pred and --gt (or --mask-check)")
    preds, gts = _scene_dirs(Path(a.pred)), _scene_dirs(Path(a.gt))
    if len(preds) == 1 and len(gts) == 1:
        gts = {next(iter(preds)): next(iter(gts.values()))}
    records = []
    for name, pd in preds.items():
        if name not in gts:
            raise FileNotFoundError(f"no ground truth for scene {name!r}")
        gd = gts[name]
        pair = {f: (_load(pd / f), _load(gd / f)) for f in SCENE_FILES}
        pair = {f: (p, g) if p is not None and g is not None else (None, None) for f, (p, g) in pair.items()}
        if all(p is None for p, _ in pair.values()):
            raise FileNotFoundError(f"scene {name!r}: no matching {', '.join(SCENE_FILES)} pairs")
        records.append(scene_record(name, *pair["depth.pfm"], *pair["defocus.pfm"], *pair["aif.pfm"],
                                    peak=a.peak))
    summary = aggregate(records)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.jsonl", "w") as f:
        for r in records + [summary]:
            f.write(json.dumps(r) + "\n")
    write_manifest(out / "manifest.json", "eval", _resolved(a), {"pred": Path(a.pred), "gt": Path(a.gt)})
    print(json.dumps(summary))
    return EXIT_OK


def _dataset(a, camera):
    if a.dataset:
        items = []
        for d in sorted(Path(a.dataset).iterdir()):
            if not d.is_dir():
                continue
            img = next((d / n for n in ("intensity.pfm", "intensity.png", "intensity.npy") if (d / n).exists()), None)
            if img is None or not (d / "depth.pfm").exists():
                raise FileNotFoundError(f"{d} needs intensity.(pfm|png|npy) and depth.pfm")
            items.append((read_image(img), read_pfm(d / "depth.pfm")))
        return items
    s = a.patch_size
    return [random_layered((s, s), camera, seed=a.seed + i) for i in range(a.synthetic)]


def cmd_optimize_mask(a) -> int:
    camera = _camera(a)
    cfg = OptimizeConfig(epochs=a.epochs, mask_learning_epochs=a.mask_learning_epochs,
                         iterations_per_epoch=a.iterations_per_epoch, iterations=a.iterations,
                         lr_mask=a.lr, lr_decay=not a.no_lr_decay, optimizer=a.optimizer, alpha0=a.alpha0,
                         alpha_schedule_divisor=a.alpha_divisor, batch_patches=a.batch_patches,
                         patch_size=a.patch_size, seed=a.seed, objective=a.objective, mask_size=a.mask_size,
                         fd_step=a.fd_step, workers=a.workers)
    dataset = _dataset(a, camera) if cfg.objective == "proxy_recon" else None
    out = Path(a.out)
    ckpt = Path(a.checkpoint) if a.checkpoint else out / "checkpoint.npz"
    trace = optimize_mask(cfg, dataset, camera, checkpoint=ckpt, resume=a.resume,
                          checkpoint_every=a.checkpoint_every, stop_after=a.stop_after)
    trace.write_jsonl(out / "trace.jsonl")
    save_mask(trace.final_binary, out / "mask.png")
    save_mask(trace.final_mask, out / "mask_continuous.png")
    np.save(out / "mask_continuous.npy", trace.final_mask.grid)
    np.save(out / "theta.npy", trace.theta)
    write_manifest(out / "manifest.json", "optimize-mask", _resolved(a),
                   {"dataset": Path(a.dataset)} if a.dataset else None,
                   {"optimize_config": config_dict(cfg), "iterations_run": len(trace.records),
                    "aborted": trace.aborted, "repaired_cells": trace.repaired_cells,
                    "mask_id": trace.final_binary.digest()})
    if trace.aborted:
        raise NumericalError(trace.aborted)
    last = trace.records[-1]["objective"] if trace.records else float("nan")
    print(f"{len(trace.records)} iterations, final objective {last:.6g}, mask -> {out / 'mask.png'}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cadsim", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"cadsim {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key=value settings file (flags override it)")
        sp.add_argument("--out", required=True, help="output directory")
        _add_camera(sp)
        sp.set_defaults(func=func)
        return sp

    g = add("gen-psf", cmd_gen_psf, "generate a naive or coded dual-pixel PSF stack")
    g.add_argument("--mask", default="none",
                   help="none (naive), open, open_half_area, mls_separable, reference or a mask image")
    dm = DpPsfModelParams()
    g.add_argument("--filter-order", type=int, default=dm.filter_order)
    g.add_argument("--shape-alpha", type=float, default=dm.shape_alpha)
    g.add_argument("--shape-beta", type=float, default=dm.shape_beta)
    g.add_argument("--smoothing-strength", type=int, default=dm.smoothing_strength)

    r = add("render", cmd_render, "render a dual-pixel capture from an RGB-D scene")
    r.add_argument("--intensity", required=True, help="8/16-bit image, PFM or .npy")
    r.add_argument("--depth", required=True, help="depth map in mm (PFM)")
    r.add_argument("--stack", required=True, help="PSF stack directory or stack.bin")
    r.add_argument("--occlusion", choices=("on", "off"), default="on")
    r.add_argument("--noise-a", type=float, default=0.0)
    r.add_argument("--noise-b", type=float, default=0.0)
    r.add_argument("--seed", type=int, default=0)

    c = add("recon", cmd_recon, "estimate defocus, depth and an all-in-focus image")
    c.add_argument("--capture", required=True, help="directory with left.pfm and right.pfm")
    c.add_argument("--stack", required=True)
    c.add_argument("--patch-radius", type=int, default=4)
    c.add_argument("--reg", type=float, default=DEFAULT_REG, help="Wiener regularizer relative to DC power")
    c.add_argument("--deconv", choices=("exact", "periodic"), default="exact")
    c.add_argument("--median", type=int, default=0, help="median filter size for the depth preview only")

    e = add("eval", cmd_eval, "score predictions against ground truth, or check a mask")
    e.add_argument("--pred")
    e.add_argument("--gt")
    e.add_argument("--peak", type=float, default=1.0)
    e.add_argument("--mask-check", help="mask to check (builtin name or image path)")

    o = add("optimize-mask", cmd_optimize_mask, "optimize an aperture code")
    oc = OptimizeConfig()
    o.add_argument("--objective", choices=("mtf_discriminability", "proxy_recon"), default=oc.objective)
    o.add_argument("--iterations", type=int, default=None, help="override epochs x iterations-per-epoch")
    o.add_argument("--epochs", type=int, default=oc.epochs)
    o.add_argument("--mask-learning-epochs", type=int, default=oc.mask_learning_epochs)
    o.add_argument("--iterations-per-epoch", type=int, default=oc.iterations_per_epoch)
    o.add_argument("--lr", type=float, default=oc.lr_mask)
    o.add_argument("--no-lr-decay", action="store_true")
    o.add_argument("--optimizer", choices=("adam", "sgd"), default=oc.optimizer)
    o.add_argument("--alpha0", type=float, default=oc.alpha0)
    o.add_argument("--alpha-divisor", type=float, default=oc.alpha_schedule_divisor)
    o.add_argument("--mask-size", type=int, default=oc.mask_size)
    o.add_argument("--batch-patches", type=int, default=oc.batch_patches)
    o.add_argument("--patch-size", type=int, default=oc.patch_size)
    o.add_argument("--fd-step", type=float, default=oc.fd_step)
    o.add_argument("--workers", type=int, default=oc.workers)
    o.add_argument("--seed", type=int, default=oc.seed)
    o.add_argument("--dataset", help="directory of scene folders with intensity.* and depth.pfm")
    o.add_argument("--synthetic", type=int, default=16, help="random layered patches when no dataset is given")
    o.add_argument("--checkpoint", help="checkpoint file (default <out>/checkpoint.npz)")
    o.add_argument("--checkpoint-every", type=int, default=0)
    o.add_argument("--resume", action="store_true")
    o.add_argument("--stop-after", type=int, default=None, help=argparse.SUPPRESS)
    return p


def read_config(path) -> dict:
    """Flat key=value file; [section] headers are allowed and ignored."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text if text.lstrip().startswith("[") else "[run]\n" + text)
    out = {}
    for sec in cp.sections():
        for k, v in cp.items(sec):
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def _find_config(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Parse argv with config-file values installed as subcommand defaults."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _find_config(argv)
    subs = parser._subparsers._group_actions[0].choices
    command = next((t for t in argv if t in subs), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    cfg = read_config(path)
    sp = subs[command]
    actions = {act.dest: act for act in sp._actions}
    unknown = sorted(set(cfg) - set(actions) - {"config"})
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for k, v in cfg.items():
        act = actions[k]
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        else:
            defaults[k] = act.type(v) if act.type is not None else v
        act.required = False
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except (ValidationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
