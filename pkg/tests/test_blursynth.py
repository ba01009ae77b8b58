import numpy as np
import pytest

import oracles
from gendeblur import blursynth as bs
from gendeblur.errors import ModelFormatError, ShapeError


class TestTrajectory:
    @pytest.mark.parametrize("length", [1.0, 5.0, 13.7, 22.0])
    def test_arc_length_exact(self, length):
        for seed in range(5):
            traj = bs.random_trajectory(length, seed)
            assert oracles.polyline_length(traj) == pytest.approx(length, rel=1e-9)

    def test_long_paths_fit_canvas(self):
        for seed in range(50):
            traj = bs.random_trajectory(28.0, seed)
            assert traj.min() >= 0.0 and traj.max() <= bs.CANVAS - 1
            # straight 28-pixel paths have to be shrunk, curved ones keep their length
            assert oracles.polyline_length(traj) >= 27.0

    def test_arc_length_within_five_percent(self):
        lengths = np.random.default_rng(0).uniform(5, 28, 200)
        errs = [abs(oracles.polyline_length(bs.random_trajectory(l, i)) - l) / l for i, l in enumerate(lengths)]
        assert np.mean(np.array(errs) < 0.05) > 0.9

    def test_rejects_bad_length(self):
        with pytest.raises(ValueError):
            bs.random_trajectory(0.5, 0)
        with pytest.raises(ValueError):
            bs.random_trajectory(40.0, 0)

    def test_seeded(self):
        np.testing.assert_array_equal(bs.random_trajectory(12.0, 7), bs.random_trajectory(12.0, 7))
        assert not np.array_equal(bs.random_trajectory(12.0, 7), bs.random_trajectory(12.0, 8))


class TestRasterize:
    def test_horizontal_segment(self):
        traj = np.array([[14.0, 9.5], [14.0, 14.5]])
        k = bs.rasterize(traj).canvas
        np.testing.assert_allclose(k[14, 10:15], 0.2, atol=1e-7)
        assert k.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.count_nonzero(k) == 5

    def test_single_point_is_delta(self):
        k = bs.rasterize(np.array([[14.0, 14.0]])).canvas
        assert k[14, 14] == 1.0 and k.sum() == 1.0

    def test_out_of_canvas(self):
        with pytest.raises(ShapeError):
            bs.rasterize(np.array([[14.0, 20.0], [14.0, 40.0]]))

    def test_invariants(self):
        for seed in range(20):
            k = bs.synthesize_kernel(5.0 + seed, seed)
            assert k.check()


class TestDataset:
    def test_split_counts(self):
        ds = bs.generate_blur_dataset(40, split=0.25, seed=3)
        assert len(ds.train) == 30 and len(ds.test) == 10
        assert set(ds.train.seeds) | set(ds.test.seeds) == set(range(40))

    def test_reproducible(self):
        a = bs.generate_blur_dataset(30, seed=11)
        b = bs.generate_blur_dataset(30, seed=11)
        assert a.train.kernels.tobytes() == b.train.kernels.tobytes()
        assert a.test.kernels.tobytes() == b.test.kernels.tobytes()
        c = bs.generate_blur_dataset(30, seed=12)
        assert a.train.kernels.tobytes() != c.train.kernels.tobytes()

    def test_lengths_in_range(self):
        ds = bs.generate_blur_dataset(50, length_range=(5, 9), seed=0)
        assert ds.train.lengths.min() >= 5 and ds.train.lengths.max() <= 9

    def test_bad_args(self):
        with pytest.raises(ValueError):
            bs.generate_blur_dataset(0)
        with pytest.raises(ValueError):
            bs.generate_blur_dataset(10, split=1.0)
        with pytest.raises(ValueError):
            bs.generate_blur_dataset(10, length_range=(5, 40))

    def test_container_round_trip(self, tmp_path):
        ks = bs.generate_blur_dataset(12, seed=1).train
        path = bs.save_kernel_set(ks, tmp_path / "k.gdbc", seed=1)
        back = bs.load_kernel_set(path)
        np.testing.assert_array_equal(back.kernels, ks.kernels)
        np.testing.assert_array_equal(back.seeds, ks.seeds)

    def test_container_wrong_type(self, tmp_path):
        from gendeblur.generators.io import write_container

        p = write_container(tmp_path / "x.gdbc", {"type": "generator"}, {"a": np.zeros(3)})
        with pytest.raises(ModelFormatError):
            bs.load_kernel_set(p)

    def test_png_previews(self, tmp_path):
        from gendeblur.imageio import read_png

        ks = bs.generate_blur_dataset(3, split=0.0, seed=2).train
        paths = bs.save_kernel_pngs(ks, tmp_path)
        img = read_png(paths[0])
        assert img.shape == (28, 28, 1) and img.max() == 1.0


class TestObservation:
    def test_zero_noise_is_exact_blur(self):
        from gendeblur import diffcore as dc

        rng = np.random.default_rng(0)
        img = rng.random((32, 32, 1)).astype(np.float32)
        k = bs.synthesize_kernel(9.0, 1)
        obs = bs.simulate_observation(img, k, 0.0, seed=5)
        np.testing.assert_array_equal(obs.y, dc.conv2d_full(img, k.canvas).data)

    def test_delta_kernel_is_identity(self):
        img = np.random.default_rng(1).random((32, 32, 3)).astype(np.float32)
        k = bs.rasterize(np.array([[14.0, 14.0]]))
        np.testing.assert_allclose(bs.simulate_observation(img, k, 0.0, 0).y, img, atol=1e-6)

    def test_noise_std(self):
        img = np.random.default_rng(2).random((64, 64, 1)).astype(np.float32)
        k = bs.synthesize_kernel(15.0, 3)
        clean = bs.simulate_observation(img, k, 0.0, 0).y
        noisy = bs.simulate_observation(img, k, 0.05, 0).y
        assert abs(np.std(noisy - clean) - 0.05) < 0.005

    def test_mean_preserved(self):
        img = np.random.default_rng(3).random((40, 40, 1)).astype(np.float32)
        for seed in range(5):
            k = bs.synthesize_kernel(6.0 + 4 * seed, seed)
            y = bs.simulate_observation(img, k, 0.0, 0).y
            assert abs(float(y.mean(dtype=np.float64)) - float(img.mean(dtype=np.float64))) < 1e-5

    def test_unclipped_and_clipped(self):
        img = np.ones((32, 32, 1), np.float32)
        obs = bs.simulate_observation(img, bs.synthesize_kernel(5.0, 0), 0.1, 1)
        assert obs.y.max() > 1.0
        assert obs.y_clipped.max() == 1.0

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            bs.simulate_observation(np.zeros((32, 32)), bs.synthesize_kernel(5.0, 0), -0.1, 0)
