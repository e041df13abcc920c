import numpy as np
import pytest
from hypothesis import given, strategies as st

from cadsim.errors import DegenerateInputError, ValidationError
from cadsim.metrics import psnr
from cadsim.psf import code_psf_stack
from cadsim.recon import (CostVolume, DefocusMap, cost_margin, deblur_aif, deconvolve, defocus_cost_volume,
                          defocus_to_depth, depth_to_defocus, estimate_defocus, reconstruct, wiener_filter)
from cadsim.render import DualPixelCapture, add_noise, build_mpi, render_simple
from cadsim.scenes import fronto_parallel

SHAPE = (96, 96)
IN = np.s_[28:-28, 28:-28]


def capture_at(camera, stack, blur, seed=4, shape=SHAPE):
    I, D = fronto_parallel(shape, blur, camera, seed=seed)
    return I, D, render_simple(build_mpi(I, D, camera, stack), stack)


class TestCostVolume:
    @pytest.mark.parametrize("plane", [1, 6, 10, 13, 19])
    def test_argmin_naive(self, camera, naive_stack, plane):
        _, _, cap = capture_at(camera, naive_stack, naive_stack.blurs[plane])
        cv = defocus_cost_volume(cap, naive_stack)
        assert (np.argmin(cv.costs, axis=0)[IN] == plane).mean() >= 0.95

    @pytest.mark.parametrize("plane", [2, 8, 12, 18])
    def test_argmin_coded(self, camera, naive_stack, reference_mask, plane):
        coded = code_psf_stack(naive_stack, reference_mask)
        _, _, cap = capture_at(camera, coded, coded.blurs[plane])
        cv = defocus_cost_volume(cap, coded)
        assert (np.argmin(cv.costs, axis=0)[IN] == plane).mean() >= 0.95

    def test_textureless_is_ambiguous(self, naive_stack):
        x = np.full((80, 80, 1), 0.25)
        cv = defocus_cost_volume(DualPixelCapture(x, x), naive_stack)
        inner = cv.costs[:, 28:-28, 28:-28]
        assert np.max(np.abs(inner - inner[0])) < 1e-9

    def test_noise_robust(self, camera, naive_stack):
        _, _, cap = capture_at(camera, naive_stack, 16.0)
        clean = np.argmin(defocus_cost_volume(cap, naive_stack).costs, axis=0)
        noisy_cap = add_noise(cap, 0.0, 0.01**2, seed=3)
        noisy = np.argmin(defocus_cost_volume(noisy_cap, naive_stack).costs, axis=0)
        assert (clean[IN] == noisy[IN]).mean() >= 0.90

    def test_zero_light_plane_is_infinite(self, naive_stack):
        grid = np.ones((21, 21))
        grid[10, 10] = 0.0  # blocks the in-focus delta
        coded = code_psf_stack(naive_stack, grid)
        x = np.random.default_rng(0).random((40, 40, 1))
        cv = defocus_cost_volume(DualPixelCapture(x, x), coded)
        assert np.all(np.isinf(cv.costs[10]))
        d = estimate_defocus(cv, coded)
        assert np.all(np.isfinite(d.normalized))

    def test_patch_radius_validation(self, naive_stack):
        x = np.zeros((8, 8, 1))
        with pytest.raises(ValidationError):
            defocus_cost_volume(DualPixelCapture(x, x), naive_stack, 0)


def synthetic_costs(stack, vertex, shape=(4, 4)):
    c = (stack.blurs[:, None, None] - vertex) ** 2
    return CostVolume(np.broadcast_to(c, (stack.num_planes,) + shape).copy(), 1e-12)


class TestEstimate:
    def test_unique_minimum_at_focus(self, naive_stack):
        d = estimate_defocus(synthetic_costs(naive_stack, 0.0), naive_stack)
        np.testing.assert_array_equal(d.normalized, 0.0)

    @given(st.floats(-37.9, 37.9))
    def test_parabola_vertex(self, v):
        from cadsim.psf import generate_psf_stack
        stack = generate_psf_stack()
        d = estimate_defocus(synthetic_costs(stack, v), stack)
        assert np.max(np.abs(d.blur_px - v)) < 1e-6

    def test_all_equal_ties_to_focus(self, naive_stack):
        d = estimate_defocus(CostVolume(np.ones((21, 5, 5)), 0.0), naive_stack)
        np.testing.assert_array_equal(d.normalized, 0.0)

    def test_near_ties_within_tolerance(self, naive_stack):
        c = np.ones((21, 3, 3))
        c[2] -= 1e-15
        d = estimate_defocus(CostVolume(c, 1e-12), naive_stack)
        np.testing.assert_array_equal(d.normalized, 0.0)
        d = estimate_defocus(CostVolume(c, 0.0), naive_stack)
        assert np.all(d.normalized == naive_stack.blurs[2] / 40)

    def test_range_and_units(self, naive_stack):
        d = estimate_defocus(synthetic_costs(naive_stack, 40.0), naive_stack, 10.72)
        np.testing.assert_allclose(d.normalized, 1.0)
        np.testing.assert_allclose(d.blur_mm, 40 * 10.72e-3)


class TestDepthConversion:
    def test_zero_is_focus(self, camera):
        z = defocus_to_depth(DefocusMap(np.zeros((3, 3)), 40.0, 10.72), camera)
        np.testing.assert_allclose(z, 400.0)

    @pytest.mark.parametrize("z", [320.0, 520.0, 365.0])
    def test_round_trip(self, camera, z):
        blur = camera.blur_px(z)
        d = DefocusMap(np.array([[blur / 40.0]]), 40.0, 10.72)
        assert defocus_to_depth(d, camera)[0, 0] == pytest.approx(z, rel=1e-6)

    def test_nan_pitch_uses_camera(self, camera):
        d = DefocusMap(np.array([[0.5]]), 40.0, float("nan"))
        assert defocus_to_depth(d, camera)[0, 0] == pytest.approx(camera.depth_from_blur_px(20.0)[()])

    def test_depth_to_defocus_clips(self, camera):
        d = depth_to_defocus(np.array([[300.0, 400.0]]), camera)
        np.testing.assert_allclose(d.normalized, [[-1.0, 0.0]])


class TestDeconvolution:
    def test_wiener_dc_gain(self, rng):
        k = rng.random((5, 5))
        W = wiener_filter(k, (32, 32), 1e-2)
        assert W[0, 0].real == pytest.approx(1 / k.sum(), rel=1e-12)

    @pytest.mark.parametrize("method", ["exact", "periodic"])
    def test_delta_passes(self, rng, method):
        Y = rng.random((20, 20))
        k = np.zeros((5, 5))
        k[2, 2] = 0.5
        np.testing.assert_allclose(deconvolve(Y, k, 1e-2, method), Y / 0.5, atol=1e-12)

    def test_degenerate(self, rng):
        with pytest.raises(DegenerateInputError):
            deconvolve(rng.random((8, 8)), np.zeros((3, 3)))
        with pytest.raises(ValidationError):
            deconvolve(rng.random((8, 8)), np.ones((3, 3)), method="nope")

    def test_focus_plane_identity(self, camera, naive_stack):
        _, D, cap = capture_at(camera, naive_stack, 0.0)
        out = deblur_aif(cap, depth_to_defocus(D, camera), naive_stack)
        assert np.max(np.abs(out - cap.combined)) < 1e-6

    def test_psnr_gain_at_20px(self, camera, naive_stack):
        I, D, cap = capture_at(camera, naive_stack, 20.0, shape=(128, 128))
        out = deblur_aif(cap, depth_to_defocus(D, camera), naive_stack)
        sl = np.s_[24:-24, 24:-24]
        gain = psnr(out[sl], I[sl]) - psnr(cap.combined[sl], I[sl])
        assert gain >= 3.0

    def test_reg_sweep_smooths(self, camera, naive_stack):
        I, D, cap = capture_at(camera, naive_stack, 20.0)
        dmap = depth_to_defocus(D, camera)
        energies = []
        for reg in (1e-3, 1e-2, 1e-1, 1.0, 10.0):
            out = deblur_aif(cap, dmap, naive_stack, reg)[24:-24, 24:-24, 0]
            F = np.fft.fft2(out - out.mean())
            f = np.hypot(*np.meshgrid(np.fft.fftfreq(out.shape[0]), np.fft.fftfreq(out.shape[1]), indexing="ij"))
            energies.append(float((np.abs(F[f > 0.15]) ** 2).sum()))
        assert all(a > b for a, b in zip(energies, energies[1:]))

    def test_reg_validation(self, camera, naive_stack):
        _, D, cap = capture_at(camera, naive_stack, 0.0, shape=(16, 16))
        with pytest.raises(ValidationError):
            deblur_aif(cap, depth_to_defocus(D, camera), naive_stack, 0.0)


class TestPipeline:
    def test_reconstruct_plane(self, camera, naive_stack):
        I, D, cap = capture_at(camera, naive_stack, -24.0)
        r = reconstruct(cap, naive_stack, camera)
        spacing = abs(camera.plane_depths()[5] - camera.plane_depths()[4])
        assert np.median(np.abs(r.depth_mm[IN] - D[IN])) < spacing
        assert r.aif.shape == I.shape and r.costs.costs.shape == (21,) + SHAPE

    def test_cost_margin(self):
        c = np.array([[[3.0]], [[1.0]], [[2.0]]])
        assert cost_margin(CostVolume(c)) == 1.0
        assert cost_margin(CostVolume(np.zeros((3, 2, 2))), np.ones((2, 2), bool)) == 0.0
