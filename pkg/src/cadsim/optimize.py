"""Aperture-code optimization with an annealed sigmoid parameterization.

Two objectives are available. ``mtf_discriminability`` scores a code from the
coded PSF stack alone (mid-band MTF plus adjacent-plane kernel dissimilarity)
and has an analytic gradient. ``proxy_recon`` renders patches, runs the
classical reconstruction and evaluates the training loss; it is optimized
with central finite differences.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import NumericalError, StateError, ValidationError
from .mask import (MaskPattern, aperture_disc, binarize, mask_from_params, mask_regularizer,
                   open_latent, sigmoid, transmission)
from .metrics import LossWeights, training_loss
from .psf import (CameraConfig, DpPsfModelParams, PsfStack, _aperture_sample_index, code_psf_stack,
                  generate_psf_stack, kernel_extent_for, midband_mask)
from .recon import DEFAULT_REG, deblur_aif, defocus_cost_volume, depth_to_defocus, estimate_defocus
from .render import add_noise, build_mpi, render_occlusion_aware

OBJECTIVES = ("mtf_discriminability", "proxy_recon")


@dataclass(frozen=True)
class OptimizeConfig:
    epochs: int = 80
    mask_learning_epochs: int = 30
    iterations_per_epoch: int = 1
    iterations: int | None = None   # overrides mask_learning_epochs * iterations_per_epoch
    lr_mask: float = 3e-4
    lr_decay: bool = True            # cosine decay over the mask-learning phase
    optimizer: str = "adam"
    alpha0: float = 0.0
    alpha_schedule_divisor: float = 8000.0
    batch_patches: int = 8
    patch_size: int = 64
    seed: int = 0
    objective: str = "mtf_discriminability"
    mask_size: int = 21
    latent_init: float = 3.0
    fd_step: float = 1e-4
    workers: int = 1
    noise_a: float = 1e-4
    noise_b: float = 1e-6
    mtf_band: tuple = (0.1, 0.3)
    mtf_weight: float = 1.0
    dissimilarity_weight: float = 1.0
    plane_light_floor: float = 0.25   # every plane's coded kernels must pass this fraction of the naive light
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.mask_learning_epochs > self.epochs:
            raise ValidationError("mask_learning_epochs cannot exceed epochs")
        if self.lr_mask < 0 or self.alpha_schedule_divisor <= 0:
            raise ValidationError("learning rate must be >= 0 and the schedule divisor positive")
        if self.iterations is not None and self.iterations < 0:
            raise ValidationError("iterations must be non-negative")
        if not 0 <= self.plane_light_floor < 1:
            raise ValidationError("plane_light_floor must lie in [0, 1)")
        if self.mask_size < 3:
            raise ValidationError("mask_size must be at least 3")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError("optimizer must be 'adam' or 'sgd'")

    @property
    def total_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        return self.mask_learning_epochs * self.iterations_per_epoch


def temperature_at(t: int, cfg: OptimizeConfig | None = None) -> float:
    cfg = cfg or OptimizeConfig()
    if t < 0:
        raise ValidationError("iteration count must be non-negative")
    return cfg.alpha0 + t / cfg.alpha_schedule_divisor


def learning_rate_at(t: int, cfg: OptimizeConfig) -> float:
    if not cfg.lr_decay:
        return cfg.lr_mask
    T = max(cfg.total_iterations, 1)
    return 0.5 * cfg.lr_mask * (1.0 + math.cos(math.pi * min(t, T) / T))


# -- MTF / discriminability objective -------------------------------------------

class CodingPlan:
    """Precomputed naive kernels and mask-cell lookups for one stack and mask size."""

    def __init__(self, stack: PsfStack, mask_size: int, band):
        if stack.coded:
            raise StateError("the objective codes the naive stack; pass an uncoded stack")
        self.stack = stack
        self.n = mask_size
        E = stack.kernel_extent_px
        self.E = E
        self.nfft = max(8, 1 << (E - 1).bit_length())
        self.band = midband_mask(self.nfft, band)
        self.planes = []
        for i, b in enumerate(stack.blurs):
            kb = kernel_extent_for(b)
            o = (E - kb) // 2
            iy, ix = _aperture_sample_index(mask_size, kb)
            if b > 0:
                iy, ix = mask_size - 1 - iy, mask_size - 1 - ix
            win = np.s_[o:o + kb, o:o + kb]
            self.planes.append((win, iy, ix, stack.left[i][win], stack.right[i][win]))
        self.naive_energy = stack.plane_energy()

    def kernels(self, M):
        out = []
        for win, iy, ix, hl, hr in self.planes:
            mult = M[iy, ix]
            cl = np.zeros((self.E, self.E))
            cr = np.zeros((self.E, self.E))
            cl[win] = mult * hl
            cr[win] = mult * hr
            out.append((cl, cr))
        return out


def _mtf_term(c, plan, want_grad):
    F = np.fft.fft2(c, s=(plan.nfft, plan.nfft))
    F0 = c.sum()
    nb = plan.band.sum()
    if F0 < 1e-12:
        return 0.0, (np.zeros_like(c) if want_grad else None)
    mag = np.abs(F)
    val = mag[plan.band].sum() / (nb * F0)
    if not want_grad:
        return val, None
    G = np.where(plan.band, np.conj(F) / np.maximum(mag, 1e-300), 0.0)
    S = np.real(np.fft.fft2(G))[:c.shape[0], :c.shape[1]]
    grad = (S / F0 - mag[plan.band].sum() / F0**2) / nb
    return val, grad


def mtf_objective_terms(theta, temperature: float, plan: CodingPlan, cfg: OptimizeConfig,
                        want_grad: bool = False):
    theta = np.asarray(theta, dtype=float)
    M = sigmoid(temperature * theta)
    ks = plan.kernels(M)
    P = len(ks)

    mtf_vals, dK = 0.0, []
    for cl, cr in ks:
        vl, gl = _mtf_term(cl, plan, want_grad)
        vr, gr = _mtf_term(cr, plan, want_grad)
        mtf_vals += vl + vr
        dK.append([gl, gr])
    mtf_mean = mtf_vals / (2 * P)

    vecs = [np.concatenate([cl.ravel(), cr.ravel()]) for cl, cr in ks]
    norms = [np.linalg.norm(v) for v in vecs]
    dis, dV = 0.0, [np.zeros_like(v) for v in vecs]
    npairs = P - 1
    for k in range(npairs):
        a, b, na, nb = vecs[k], vecs[k + 1], norms[k], norms[k + 1]
        if na == 0 or nb == 0:
            continue
        cos = a @ b / (na * nb)
        dis += 1.0 - cos
        if want_grad:
            dV[k] -= b / (na * nb) - cos * a / na**2
            dV[k + 1] -= a / (na * nb) - cos * b / nb**2
    dis_mean = dis / npairs

    T = transmission(M)
    beta5 = cfg.weights.beta5
    light = np.array([(cl.sum() + cr.sum()) for cl, cr in ks]) / plan.naive_energy
    short = light < cfg.plane_light_floor
    penalty = beta5 * (max(0.0, 0.5 - T) + np.sum(cfg.plane_light_floor - light[short]) / P)
    value = -(cfg.mtf_weight * mtf_mean + cfg.dissimilarity_weight * dis_mean) + penalty
    terms = {"value": value, "mtf": mtf_mean, "dissimilarity": dis_mean, "penalty": penalty,
             "transmission": T, "min_plane_light": float(light.min())}
    if not want_grad:
        return terms, None

    E2 = plan.E * plan.E
    dM = np.zeros_like(M)
    for k, (win, iy, ix, hl, hr) in enumerate(plan.planes):
        gcl = -cfg.mtf_weight * dK[k][0] / (2 * P) - cfg.dissimilarity_weight * dV[k][:E2].reshape(plan.E, plan.E) / npairs
        gcr = -cfg.mtf_weight * dK[k][1] / (2 * P) - cfg.dissimilarity_weight * dV[k][E2:].reshape(plan.E, plan.E) / npairs
        if short[k]:
            gcl = gcl - beta5 / (P * plan.naive_energy[k])
            gcr = gcr - beta5 / (P * plan.naive_energy[k])
        np.add.at(dM, (iy, ix), gcl[win] * hl + gcr[win] * hr)
    if T < 0.5:
        dM -= beta5 / aperture_disc(M.shape[0]).sum()
    return terms, dM * temperature * M * (1.0 - M)


def objective_mtf_discriminability(theta, t: int, stack: PsfStack, cfg: OptimizeConfig | None = None,
                                   plan: CodingPlan | None = None) -> float:
    """Negative (mean mid-band MTF + mean adjacent-plane cosine distance) plus the transmission hinge."""
    cfg = cfg or OptimizeConfig(mask_size=np.shape(theta)[0])
    plan = plan or CodingPlan(stack, np.shape(theta)[0], cfg.mtf_band)
    terms, _ = mtf_objective_terms(theta, temperature_at(t, cfg), plan, cfg)
    return terms["value"]


def mtf_objective_gradient(theta, t: int, stack: PsfStack, cfg: OptimizeConfig | None = None,
                           plan: CodingPlan | None = None) -> np.ndarray:
    cfg = cfg or OptimizeConfig(mask_size=np.shape(theta)[0])
    plan = plan or CodingPlan(stack, np.shape(theta)[0], cfg.mtf_band)
    _, g = mtf_objective_terms(theta, temperature_at(t, cfg), plan, cfg, want_grad=True)
    return g


# -- proxy reconstruction objective ---------------------------------------------

def classical_reconstruction(capture, stack: PsfStack, camera: CameraConfig, patch_radius: int = 4,
                             reg: float = DEFAULT_REG):
    """(AIF, normalized defocus) from the cost volume and periodic Wiener deblurring."""
    d = estimate_defocus(defocus_cost_volume(capture, stack, patch_radius), stack, camera.pixel_pitch_um)
    return deblur_aif(capture, d, stack, reg, method="periodic"), d.normalized


def objective_proxy_recon(theta, t: int, batch, stack: PsfStack, camera: CameraConfig,
                          cfg: OptimizeConfig | None = None, seed: int = 0,
                          reconstruct: Callable | None = None, return_terms: bool = False):
    """Mean training loss over a batch of (intensity, depth) patches.

    mask from latent -> coded stack -> occlusion-aware render -> seeded noise
    -> reconstruction -> loss against the sharp patch and its defocus map.
    """
    cfg = cfg or OptimizeConfig()
    reconstruct = reconstruct or classical_reconstruction
    mask = mask_from_params(theta, temperature_at(t, cfg))
    coded = code_psf_stack(stack, mask)
    totals = {"total": 0.0, "l_aif": 0.0, "l_defocus": 0.0, "l_mask": 0.0}
    batch = list(batch)
    if not batch:
        raise ValidationError("empty batch")
    for j, (intensity, depth) in enumerate(batch):
        scene = build_mpi(intensity, depth, camera, coded)
        cap = render_occlusion_aware(scene, coded)
        cap = add_noise(cap, cfg.noise_a, cfg.noise_b, seed + j)
        aif, dnorm = reconstruct(cap, coded, camera)
        gt = scene.composite()
        gt_def = depth_to_defocus(depth, camera).normalized
        loss = training_loss(aif, gt, dnorm, gt_def, mask, cfg.weights)
        for k in totals:
            totals[k] += loss[k] / len(batch)
    return totals if return_terms else totals["total"]


# -- finite differences ---------------------------------------------------------

def finite_diff_gradient(objective: Callable, theta, h: float = 1e-4, workers: int = 1) -> np.ndarray:
    """Central differences; ``objective`` must be deterministic in theta."""
    theta = np.asarray(theta, dtype=float)
    flat = theta.ravel()

    def probe(i):
        tp = flat.copy()
        tm = flat.copy()
        tp[i] += h
        tm[i] -= h
        fp = objective(tp.reshape(theta.shape))
        fm = objective(tm.reshape(theta.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"objective not finite at perturbed parameter {i}")
        return (fp - fm) / (2 * h)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            g = list(ex.map(probe, range(flat.size)))
    else:
        g = [probe(i) for i in range(flat.size)]
    return np.array(g).reshape(theta.shape)


# -- optimization loop ----------------------------------------------------------

@dataclass
class OptimizeTrace:
    records: list = field(default_factory=list)
    final_mask: MaskPattern | None = None
    final_binary: MaskPattern | None = None
    theta: np.ndarray | None = None
    aborted: str | None = None
    repaired_cells: int = 0

    @property
    def objective_values(self):
        return np.array([r["objective"] for r in self.records])

    @property
    def temperatures(self):
        return np.array([r["temperature"] for r in self.records])

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r) + "\n")
        return path


def enforce_transmission(theta, binary: MaskPattern, minimum: float = 0.5):
    """Open closed aperture cells in decreasing latent order until transmission >= minimum."""
    grid = binary.grid.copy()
    disc = aperture_disc(grid.shape[0]) > 0
    opened = 0
    if transmission(grid) >= minimum:
        return binary, 0
    cand = np.argwhere(disc & (grid == 0))
    order = np.argsort(-theta[disc & (grid == 0)], kind="stable")
    for i in order:
        y, x = cand[i]
        grid[y, x] = 1.0
        opened += 1
        if transmission(grid) >= minimum:
            break
    return MaskPattern(grid, None, binary.temperature, binary=True), opened


def _save_checkpoint(path, theta, m, v, t, rng, trace):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, theta=theta, m=m, v=v, t=np.array(t),
             rng=np.array(json.dumps(rng.bit_generator.state)),
             records=np.array(json.dumps(trace.records)))
    tmp.replace(path)


def _load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(str(z["rng"]))
        return (z["theta"].copy(), z["m"].copy(), z["v"].copy(), int(z["t"]), rng,
                json.loads(str(z["records"])))


def optimize_mask(cfg: OptimizeConfig, dataset=None, camera: CameraConfig | None = None,
                  model: DpPsfModelParams | None = None, checkpoint: str | Path | None = None,
                  resume: bool = False, checkpoint_every: int = 0, stop_after: int | None = None,
                  init_theta=None, callback: Callable | None = None) -> OptimizeTrace:
    """Anneal-and-descend on the latent mask parameters.

    Runs ``cfg.total_iterations`` updates (the mask-learning phase; the mask
    is frozen afterwards). Temperature follows alpha0 + t / divisor. Returns
    the trace with the final continuous mask and a binarized mask whose
    transmission is at least 0.5.
    """
    camera = camera or CameraConfig()
    stack = generate_psf_stack(camera, model)
    n = cfg.mask_size
    if cfg.objective == "proxy_recon":
        dataset = list(dataset or [])
        if not dataset:
            raise ValidationError("proxy_recon needs a non-empty dataset of (intensity, depth) patches")
        plan = None
    else:
        plan = CodingPlan(stack, n, cfg.mtf_band)

    theta = open_latent(n, cfg.latent_init) if init_theta is None else np.array(init_theta, dtype=float)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t0 = 0
    rng = np.random.default_rng(cfg.seed)
    trace = OptimizeTrace()
    if resume and checkpoint and Path(checkpoint).exists():
        theta, m, v, t0, rng, trace.records = _load_checkpoint(checkpoint)

    total = cfg.total_iterations
    b1, b2, eps = 0.9, 0.999, 1e-8
    best = min((r["objective"] for r in trace.records), default=np.inf)
    t_done = t0
    for t in range(t0, total):
        if stop_after is not None and t >= stop_after:
            break
        alpha = temperature_at(t, cfg)
        if cfg.objective == "mtf_discriminability":
            terms, g = mtf_objective_terms(theta, alpha, plan, cfg, want_grad=True)
            f = terms["value"]
        else:
            idx = rng.choice(len(dataset), size=min(cfg.batch_patches, len(dataset)), replace=False)
            batch = [dataset[i] for i in idx]
            seed = int(rng.integers(2**31 - 1))

            def obj(th, _t=t, _b=batch, _s=seed):
                return objective_proxy_recon(th, _t, _b, stack, camera, cfg, _s)

            f = obj(theta)
            g = finite_diff_gradient(obj, theta, cfg.fd_step, cfg.workers)
            terms = {"value": f, "transmission": transmission(sigmoid(alpha * theta))}
        gnorm = float(np.linalg.norm(g))
        if not (np.isfinite(f) and np.isfinite(gnorm)):
            trace.aborted = f"non-finite objective or gradient at iteration {t}"
            break
        best = min(best, f)
        rec = {"iteration": t, "temperature": alpha, "objective": float(f), "best_objective": float(best),
               "transmission": float(terms["transmission"]), "grad_norm": gnorm,
               "lr": learning_rate_at(t, cfg)}
        trace.records.append(rec)
        if callback:
            callback(rec)

        lr = learning_rate_at(t, cfg)
        if cfg.optimizer == "adam":
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** (t + 1))
            vhat = v / (1 - b2 ** (t + 1))
            theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
        else:
            theta = theta - lr * g
        t_done = t + 1
        if checkpoint and checkpoint_every and (t + 1) % checkpoint_every == 0:
            _save_checkpoint(checkpoint, theta, m, v, t + 1, rng, trace)

    if checkpoint:
        _save_checkpoint(checkpoint, theta, m, v, t_done, rng, trace)
    alpha_end = temperature_at(t_done, cfg)
    trace.theta = theta
    trace.final_mask = mask_from_params(theta, alpha_end)
    binary = binarize(trace.final_mask) if alpha_end > 0 else binarize(mask_from_params(theta, 1.0))
    trace.final_binary, trace.repaired_cells = enforce_transmission(theta, binary)
    return trace


def binarized_regularizer(trace: OptimizeTrace, beta5: float = 1e3) -> float:
    return mask_regularizer(trace.final_binary, beta5)


def config_dict(cfg: OptimizeConfig) -> dict:
    d = asdict(cfg)
    d["mtf_band"] = list(cfg.mtf_band)
    return d


def config_from_dict(d: dict) -> OptimizeConfig:
    d = dict(d)
    if "weights" in d and isinstance(d["weights"], dict):
        d["weights"] = LossWeights(**d["weights"])
    if "mtf_band" in d:
        d["mtf_band"] = tuple(d["mtf_band"])
    return replace(OptimizeConfig(), **d)
