import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cadsim.errors import ValidationError
from cadsim.mask import aperture_disc, builtin_mask
from cadsim.metrics import (LossWeights, affine_invariant_metrics, depth_metrics, forward_gradient, gaussian_window,
                            image_metrics, l1_affine_fit, psnr, ssim, training_loss)

grids = arrays(np.int64, (6, 6), elements=st.integers(-50, 50), unique=True).map(lambda a: a / 10.0)


class TestDepth:
    def test_exact(self, rng):
        gt = rng.uniform(300, 500, (8, 8))
        m = depth_metrics(gt, gt)
        assert m == {"rmse_mm": 0.0, "mae_mm": 0.0, "delta1": 1.0}

    def test_constant_offset(self, rng):
        gt = rng.uniform(300, 500, (8, 8))
        assert depth_metrics(gt + 1.0, gt)["mae_mm"] == pytest.approx(1.0, abs=1e-12)

    def test_brute_force(self, rng):
        gt = rng.uniform(300, 500, (7, 9))
        pred = gt * rng.uniform(0.9, 1.1, gt.shape)
        m = depth_metrics(pred, gt)
        se = ae = hits = 0.0
        for p, g in zip(pred.ravel(), gt.ravel()):
            se += (p - g) ** 2
            ae += abs(p - g)
            hits += max(p / g, g / p) < 1.05
        n = gt.size
        assert m["rmse_mm"] == pytest.approx(math.sqrt(se / n), rel=1e-12)
        assert m["mae_mm"] == pytest.approx(ae / n, rel=1e-12)
        assert m["delta1"] == pytest.approx(hits / n)

    def test_errors(self):
        with pytest.raises(ValidationError):
            depth_metrics(np.ones(3), np.ones(4))
        with pytest.raises(ValidationError):
            depth_metrics(np.ones(3), np.zeros(3))

    def test_nonpositive_prediction_fails_delta(self):
        m = depth_metrics(np.array([0.0, 400.0]), np.array([400.0, 400.0]))
        assert m["delta1"] == 0.5


def grid_search_ai2(x, y):
    """Zooming grid search over (p, q) for the root-mean-square affine residual."""
    p0, q0, span_p, span_q = 0.0, 0.0, 20.0, 20.0
    best = None
    for _ in range(12):
        ps = np.linspace(p0 - span_p, p0 + span_p, 81)
        qs = np.linspace(q0 - span_q, q0 + span_q, 81)
        P, Q = np.meshgrid(ps, qs, indexing="ij")
        r = np.sqrt(np.mean((y[None, None] - (P[..., None] * x[None, None] + Q[..., None])) ** 2, axis=-1))
        i, j = np.unravel_index(np.argmin(r), r.shape)
        best = r[i, j]
        p0, q0 = ps[i], qs[j]
        span_p, span_q = span_p / 8, span_q / 8
    return best


class TestAffineInvariant:
    def test_affine_transform(self, rng):
        gt = rng.normal(size=(10, 10))
        m = affine_invariant_metrics(3 * gt + 7, gt)
        assert m["ai1"] < 1e-9 and m["ai2"] < 1e-9
        assert m["one_minus_abs_spearman"] < 1e-12

    @given(grids)
    def test_monotone_transform(self, gt):
        m = affine_invariant_metrics(np.exp(gt) - 4.0, gt)
        assert m["one_minus_abs_spearman"] < 1e-12
        m = affine_invariant_metrics(-gt**3, gt)
        assert m["one_minus_abs_spearman"] < 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_ai2_grid_search(self, seed):
        r = np.random.default_rng(seed)
        x, y = r.normal(size=16), r.normal(size=16)
        assert affine_invariant_metrics(x, y)["ai2"] == pytest.approx(grid_search_ai2(x, y), abs=1e-4)

    def test_ai1_against_exhaustive_lines(self, rng):
        # an optimal L1 line passes through two data points
        x, y = rng.normal(size=12), rng.normal(size=12)
        best = np.inf
        for i in range(12):
            for j in range(i + 1, 12):
                p = (y[j] - y[i]) / (x[j] - x[i])
                q = y[i] - p * x[i]
                best = min(best, np.mean(np.abs(y - p * x - q)))
        assert affine_invariant_metrics(x, y)["ai1"] == pytest.approx(best, abs=1e-6)

    @given(grids, st.floats(0.1, 10), st.floats(-10, 10))
    def test_affine_invariance(self, pred, p, q):
        gt = np.sin(pred) + 0.1 * pred
        a = affine_invariant_metrics(pred, gt)
        b = affine_invariant_metrics(p * pred + q, gt)
        assert b["ai2"] == pytest.approx(a["ai2"], abs=1e-9)
        assert b["ai1"] == pytest.approx(a["ai1"], abs=1e-6)

    def test_constant_prediction(self, rng):
        gt = rng.normal(size=20)
        with pytest.warns(RuntimeWarning):
            m = affine_invariant_metrics(np.ones(20), gt)
        assert m["degenerate"]
        assert m["ai2"] == pytest.approx(gt.std())
        assert m["ai1"] == pytest.approx(np.mean(np.abs(gt - np.median(gt))))
        assert m["one_minus_abs_spearman"] == 1.0

    def test_l1_fit_outlier_robust(self):
        x = np.arange(10.0)
        y = 2 * x + 1
        y[3] += 100
        p, q = l1_affine_fit(x, y)
        assert p == pytest.approx(2, abs=1e-6) and q == pytest.approx(1, abs=1e-6)


def ssim_loop(x, y, peak=1.0):
    w = gaussian_window()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            a, b = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            ma, mb = (w * a).sum(), (w * b).sum()
            va = (w * (a - ma) ** 2).sum()
            vb = (w * (b - mb) ** 2).sum()
            cov = (w * (a - ma) * (b - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestImage:
    def test_identical(self, rng):
        x = rng.random((16, 16, 3))
        m = image_metrics(x, x)
        assert m["psnr_db"] == float("inf") and m["ssim"] == pytest.approx(1.0, abs=1e-12)

    def test_psnr_closed_form(self):
        gt = np.zeros((10, 10))
        assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-12)
        assert psnr(gt + 2.0, gt, peak=20.0) == pytest.approx(20.0, abs=1e-12)

    def test_ssim_loop(self, rng):
        x, y = rng.random((20, 23)), rng.random((20, 23))
        assert ssim(x, y) == pytest.approx(ssim_loop(x, y), abs=1e-12)

    def test_ssim_channels_average(self, rng):
        x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        expect = np.mean([ssim_loop(x[:, :, c], y[:, :, c]) for c in range(3)])
        assert ssim(x, y) == pytest.approx(expect, abs=1e-12)

    def test_errors(self, rng):
        with pytest.raises(ValidationError):
            psnr(rng.random(4), rng.random(4), peak=0)
        with pytest.raises(ValidationError):
            ssim(rng.random((8, 8)), rng.random((8, 8)))


def loss_loop(pa, ga, pd, gd, T, w):
    def l1(a, b):
        return np.mean(np.abs(a - b))

    def grads(a):
        gy, gx = np.zeros_like(a), np.zeros_like(a)
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                if i + 1 < a.shape[0]:
                    gy[i, j] = a[i + 1, j] - a[i, j]
                if j + 1 < a.shape[1]:
                    gx[i, j] = a[i, j + 1] - a[i, j]
        return gy, gx

    def term(p, g, b_val, b_grad):
        py, px = grads(p)
        gy, gx = grads(g)
        return b_val * l1(p, g) + b_grad * 0.5 * (l1(py, gy) + l1(px, gx))

    return (term(pa, ga, w.beta1, w.beta2) + term(pd, gd, w.beta3, w.beta4)
            + w.beta5 * max(0.0, 0.5 - T))


class TestTrainingLoss:
    def test_zero_at_truth(self, rng):
        a, d = rng.random((8, 8)), rng.uniform(-1, 1, (8, 8))
        out = training_loss(a, a, d, d, builtin_mask("open"))
        assert out == {"total": 0.0, "l_aif": 0.0, "l_defocus": 0.0, "l_mask": 0.0}

    def test_constant_offset(self, rng):
        a, d = rng.random((8, 8)), rng.random((8, 8))
        out = training_loss(a + 0.3, a, d, d, builtin_mask("open"))
        assert out["l_aif"] == pytest.approx(0.3, abs=1e-12)
        assert out["total"] == pytest.approx(0.3, abs=1e-12)

    def test_brute_force(self, rng):
        w = LossWeights(0.7, 0.2, 1.3, 0.4, 50.0)
        pa, ga, pd, gd = (rng.random((6, 7)) for _ in range(4))
        grid = 0.3 * aperture_disc(9)
        out = training_loss(pa, ga, pd, gd, grid, w)
        assert out["total"] == pytest.approx(loss_loop(pa, ga, pd, gd, 0.3, w), abs=1e-9)
        assert out["l_mask"] == pytest.approx(50 * 0.2, abs=1e-9)

    @given(st.integers(0, 1000))
    def test_non_negative(self, seed):
        r = np.random.default_rng(seed)
        out = training_loss(r.random((5, 5)), r.random((5, 5)), r.random((5, 5)), r.random((5, 5)),
                            r.random((7, 7)))
        assert out["total"] >= 0

    def test_forward_gradient(self):
        img = np.arange(12.0).reshape(3, 4)
        gy, gx = forward_gradient(img)
        np.testing.assert_array_equal(gy[:2], 4.0)
        np.testing.assert_array_equal(gy[2], 0.0)
        np.testing.assert_array_equal(gx[:, :3], 1.0)
        np.testing.assert_array_equal(gx[:, 3], 0.0)

    def test_weights_validation(self):
        with pytest.raises(ValidationError):
            LossWeights(beta1=-1)
        with pytest.raises(ValidationError):
            LossWeights(beta5=np.inf)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValidationError):
            training_loss(rng.random((4, 4)), rng.random((4, 5)), rng.random((4, 4)), rng.random((4, 4)),
                          builtin_mask("open"))
