import math

import numpy as np
import pytest

import oracles
from gendeblur import metrics
from gendeblur.errors import ShapeError


class TestPsnr:
    def test_identical_is_infinite_and_capped(self):
        x = np.random.default_rng(0).random((16, 16))
        assert metrics.psnr(x, x) == math.inf
        rep = metrics.evaluate(x, x)
        assert rep.to_json()["psnr_db"] == metrics.PSNR_CAP

    def test_mse_hundredth_is_twenty_db(self):
        assert metrics.psnr(np.zeros((16, 16)), np.full((16, 16), 0.1)) == pytest.approx(20.0, abs=1e-12)

    def test_exact_hundredth_is_exactly_twenty(self):
        b = np.where(np.arange(100) < 64, 0.125, 0.0).reshape(10, 10)
        assert metrics.mse(np.zeros((10, 10)), b) == 0.01
        assert metrics.psnr(np.zeros((10, 10)), b) == 20.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            a, b = rng.random((12, 9, 3)), rng.random((12, 9, 3))
            assert abs(metrics.psnr(a, b) - oracles.mse_psnr(a, b)) < 1e-6

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((10, 10)), rng.random((10, 10))
        assert metrics.psnr(a, b) == metrics.psnr(b, a)

    def test_decreases_with_noise(self):
        x = np.random.default_rng(3).random((32, 32))
        vals = [metrics.psnr(x, x + s * np.random.default_rng(4).normal(size=x.shape)) for s in (0.01, 0.05, 0.1)]
        assert vals[0] > vals[1] > vals[2]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics.psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsim:
    def test_identity_exact(self):
        x = np.random.default_rng(0).random((20, 20, 3))
        assert metrics.ssim(x, x) == 1.0

    def test_zero_variance_closed_form(self):
        c1 = 1e-4
        val = metrics.ssim(np.zeros((16, 16)), np.full((16, 16), 0.5))
        assert abs(val - c1 / (0.25 + c1)) < 1e-7
        assert abs(val - 3.9984e-4) < 1e-7

    @pytest.mark.parametrize("shape", [(11, 11), (17, 23), (32, 32, 3), (32, 32, 1)])
    def test_matches_loop_oracle(self, shape):
        rng = np.random.default_rng(sum(shape))
        a = rng.random(shape)
        b = np.clip(a + 0.2 * rng.normal(size=shape), 0, 1)
        ref = oracles.ssim_loop(metrics.to_gray(a), metrics.to_gray(b))
        assert abs(metrics.ssim(a, b) - ref) < 1e-5

    def test_luma_weights(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        ga = 0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2]
        gb = 0.299 * b[..., 0] + 0.587 * b[..., 1] + 0.114 * b[..., 2]
        assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(ga, gb), abs=1e-12)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            a, b = rng.random((15, 15)), rng.random((15, 15))
            s = metrics.ssim(a, b)
            assert s == pytest.approx(metrics.ssim(b, a), abs=1e-12)
            assert -1.0 <= s < 1.0

    def test_too_small(self):
        with pytest.raises(ShapeError):
            metrics.ssim(np.zeros((10, 12)), np.ones((10, 12)))
        with pytest.raises(ShapeError):
            metrics.ssim(np.zeros((10, 12)), np.zeros((10, 12)))


class TestAggregate:
    def test_single(self):
        r = metrics.MetricReport(21.5, 0.7, 0.007)
        s = metrics.aggregate([r])
        assert (s.mean_psnr, s.mean_ssim, s.count) == (21.5, 0.7, 1)

    def test_two(self):
        s = metrics.aggregate([metrics.MetricReport(20.0, 0.5, 0.01), metrics.MetricReport(30.0, 0.7, 0.001)])
        assert s.mean_psnr == 25.0
        assert s.mean_ssim == pytest.approx(0.6)

    def test_eighty_match_manual_mean(self):
        rng = np.random.default_rng(7)
        reps = [metrics.MetricReport(float(p), float(q), 0.0) for p, q in zip(rng.uniform(15, 35, 80), rng.random(80))]
        s = metrics.aggregate(reps)
        assert s.mean_psnr == pytest.approx(sum(r.psnr_db for r in reps) / 80, abs=1e-12)
        assert s.mean_ssim == pytest.approx(sum(r.ssim for r in reps) / 80, abs=1e-12)

    def test_infinite_excluded(self):
        s = metrics.aggregate([metrics.MetricReport(math.inf, 1.0, 0.0), metrics.MetricReport(30.0, 0.9, 0.001)])
        assert s.mean_psnr == 30.0 and s.n_infinite == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            metrics.aggregate([])


def test_range_error_is_euclidean_norm():
    a = np.zeros((2, 2, 1))
    b = np.full((2, 2, 1), 0.5)
    assert metrics.range_error(a, b) == pytest.approx(1.0)
