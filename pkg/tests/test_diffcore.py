import numpy as np
import pytest

from gendeblur import diffcore as dc
from gendeblur.diffcore import Tape, Tensor
from gendeblur.errors import NumericError, ShapeError, UsageError

import oracles
from oracles import central_diff, direct_circular_conv, direct_circular_conv_fast, rel_err


def tape_grads(fn, arrays, proj):
    """Gradients of sum(fn(*xs) * proj) from the tape, in float64."""
    with dc.precision(np.float64):
        xs = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = (fn(*xs) * proj).sum()
        tape.backward(loss)
        return [x.grad for x in xs]


def fd_grads(fn, arrays, proj):
    def f(*arrs):
        with dc.precision(np.float64):
            return float((fn(*[Tensor(a) for a in arrs]).data * proj).sum())

    return central_diff(f, arrays)


def check_grad(fn, arrays, seed=0, tol=1e-3):
    rng = np.random.default_rng(seed)
    with dc.precision(np.float64):
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
    proj = rng.normal(size=out_shape)
    got = tape_grads(fn, arrays, proj)
    want = fd_grads(fn, arrays, proj)
    for g, w in zip(got, want):
        assert rel_err(g, w) < tol


def distinct(rng, shape, scale=1.0):
    """Values separated by >= 0.01*scale so max/abs kinks are never crossed."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2.0) * 0.02 * scale + rng.uniform(0.002, 0.008) * scale
    return vals.reshape(shape)


class TestTape:
    def test_square_norm_gradient(self):
        z = Tensor([3.0, 4.0], requires_grad=True)
        with Tape() as tape:
            loss = (z * z).sum()
        dc.backward(loss)
        np.testing.assert_array_equal(z.grad, [6.0, 8.0])
        assert tape.nodes  # recorded

    def test_unreached_leaf_gets_zero(self):
        with Tape() as tape:
            a = Tensor([1.0, 2.0], requires_grad=True)
            b = Tensor([5.0], requires_grad=True)
            loss = dc.square(a).sum()
        tape.backward(loss)
        np.testing.assert_array_equal(b.grad, [0.0])
        np.testing.assert_array_equal(a.grad, [2.0, 4.0])

    def test_nonscalar_loss_rejected(self):
        z = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = z * 2.0
        with pytest.raises(UsageError):
            tape.backward(y)

    def test_loss_without_tape_rejected(self):
        z = Tensor([1.0], requires_grad=True)
        with pytest.raises(UsageError):
            dc.backward((z * z).sum())

    def test_topological_order(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = dc.relu(x * 2.0)
            loss = (y + x).sum()
        seen = {id(x)}
        for node in tape.nodes:
            for p in node.parents:
                if p.requires_grad:
                    assert id(p) in seen
            seen.add(id(node.out))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 3.0)

    def test_no_recording_without_grad(self):
        with Tape() as tape:
            dc.relu(Tensor(np.ones(3))) * 2.0
        assert tape.nodes == []

    def test_storage_is_float32(self):
        assert Tensor([1.0]).data.dtype == np.float32
        with dc.precision(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64


class TestCircularConv:
    def test_delta_kernel_is_identity(self):
        x = np.random.default_rng(1).random((7, 5, 3))
        out = dc.conv2d_full(x, np.ones((1, 1))).data
        np.testing.assert_allclose(out, x.astype(np.float32), atol=1e-7)

    def test_ramp_uniform_matches_direct_loop(self):
        x = np.arange(16.0).reshape(4, 4, 1)
        k = np.full((3, 3), 1.0 / 9.0)
        want = direct_circular_conv(x, k)
        with dc.precision(np.float64):
            got = dc.conv2d_full(x, k).data
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_ramp_uniform_float32_storage(self):
        x = np.arange(16.0).reshape(4, 4, 1) / 16.0
        k = np.full((3, 3), 1.0 / 9.0)
        np.testing.assert_allclose(dc.conv2d_full(x, k).data, direct_circular_conv(x, k), atol=1e-6)

    def test_constant_image_preserved(self):
        k = np.random.default_rng(2).random((5, 4))
        k /= k.sum()
        out = dc.conv2d_full(np.full((8, 9, 2), 0.37), k).data
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_even_kernel_centre_convention(self):
        # delta at (kh//2, kw//2) is the identity, also for even sizes
        k = np.zeros((4, 6))
        k[2, 3] = 1.0
        x = np.random.default_rng(3).random((8, 8, 1))
        np.testing.assert_allclose(dc.conv2d_full(x, k).data, x, atol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_sizes_match_oracle(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(8, 40, size=2)
        kh, kw = rng.integers(1, min(h, w, 28) + 1, size=2)
        img = rng.random((h, w, 2))
        ker = rng.random((kh, kw))
        ker /= ker.sum()
        np.testing.assert_allclose(dc.conv2d_full(img, ker).data, direct_circular_conv_fast(img, ker), atol=1e-6)

    def test_batched_kernel_broadcasts(self):
        rng = np.random.default_rng(4)
        img = rng.random((6, 6, 1))
        kers = rng.random((3, 3, 3))
        out = dc.conv2d_full(img, kers).data
        assert out.shape == (3, 6, 6, 1)
        for r in range(3):
            np.testing.assert_allclose(out[r], direct_circular_conv(img, kers[r]), atol=1e-5)

    def test_kernel_larger_than_image(self):
        with pytest.raises(ShapeError):
            dc.conv2d_full(np.zeros((4, 4, 1)), np.zeros((5, 3)))

    def test_nonfinite_input(self):
        img = np.zeros((4, 4, 1))
        img[1, 1, 0] = np.nan
        with pytest.raises(NumericError):
            dc.conv2d_full(img, np.ones((1, 1)))

    def test_gradients(self):
        rng = np.random.default_rng(5)
        check_grad(dc.conv2d_full, [rng.random((6, 7, 2)), rng.random((3, 4))])

    def test_mean_preserved(self):
        rng = np.random.default_rng(6)
        img = rng.random((16, 16, 1))
        k = rng.random((9, 9))
        k /= k.sum()
        assert abs(dc.conv2d_full(img, k).data.mean() - img.mean()) < 1e-5


class TestDense:
    def test_identity(self):
        x = np.array([0.5, -1.0, 2.0])
        np.testing.assert_allclose(dc.dense(x, np.eye(3), np.zeros(3)).data, x)

    def test_arithmetic(self):
        out = dc.dense(np.array([1.0, 2.0]), np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([1.0, 0.0]))
        np.testing.assert_array_equal(out.data, [4.0, 2.0])

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            dc.dense(np.ones(3), np.ones((2, 2)), np.ones(2))

    @pytest.mark.parametrize("seed", range(3))
    def test_norm_gradient_fd(self, seed):
        rng = np.random.default_rng(seed)
        x, W, b = rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3)

        def loss(x, W, b):
            return dc.square(dc.dense(x, W, b)).sum()

        with dc.precision(np.float64):
            ts = [Tensor(a, requires_grad=True) for a in (x, W, b)]
            with Tape() as tape:
                val = loss(*ts)
            tape.backward(val)

        def f(*arrs):
            with dc.precision(np.float64):
                return loss(*arrs).item()

        for t, g in zip(ts, central_diff(f, [x, W, b])):
            assert rel_err(t.grad, g) < 1e-3

    def test_batched_gradient(self):
        rng = np.random.default_rng(7)
        check_grad(dc.dense, [rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), rng.normal(size=3)])


class TestConvLayers:
    def test_local_sums(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        out = dc.conv2d(x, np.ones((1, 1, 2, 2)), stride=1).data
        np.testing.assert_array_equal(out[0, 0], [[8.0, 12.0], [20.0, 24.0]])

    @pytest.mark.parametrize("hw,stride,size", [((8, 8), 2, 2), ((9, 7), 2, 2), ((7, 6), 1, 2), ((9, 9), 3, 3)])
    def test_against_loops(self, hw, stride, size):
        rng = np.random.default_rng(sum(hw) + stride + size)
        x = rng.normal(size=(2, 3) + hw)
        w = rng.normal(size=(4, 3, size, size))
        with dc.precision(np.float64):
            np.testing.assert_allclose(dc.conv2d(x, w, stride=stride).data, oracles.direct_conv_layer(x, w, stride),
                                       atol=1e-10)
            xt = rng.normal(size=(2, 4) + hw)
            np.testing.assert_allclose(dc.conv_transpose2d(xt, w, stride=stride).data,
                                       oracles.direct_convT_layer(xt, w, stride), atol=1e-10)

    def test_convT_shape_rule(self):
        out = dc.conv_transpose2d(np.zeros((1, 20, 12, 12)), np.zeros((20, 20, 2, 2)), stride=1)
        assert out.shape == (1, 20, 13, 13)

    @pytest.mark.parametrize("stride,size", [(1, 2), (2, 2), (2, 3), (1, 1), (3, 2)])
    def test_adjoint_identity(self, stride, size):
        rng = np.random.default_rng(stride * 10 + size)
        x = rng.normal(size=(2, 3, 9, 8))
        w = rng.normal(size=(4, 3, size, size))
        with dc.precision(np.float64):
            cx = dc.conv2d(x, w, stride=stride).data
            y = rng.normal(size=cx.shape)
            ty = dc.conv_transpose2d(y, w, stride=stride).data
        # convT output may be smaller than x when stride does not divide evenly
        lhs = (cx * y).sum()
        rhs = (x[:, :, : ty.shape[2], : ty.shape[3]] * ty).sum()
        assert abs(lhs - rhs) < 1e-5 * max(1.0, abs(lhs))

    def test_nonpositive_output_rejected(self):
        with pytest.raises(ShapeError):
            dc.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))
        with pytest.raises(ShapeError):
            dc.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 1, 2, 2)))

    @pytest.mark.parametrize("stride,hw", [(1, 5), (2, 5), (2, 6)])
    def test_conv_gradients(self, stride, hw):
        rng = np.random.default_rng(stride + hw)
        check_grad(
            lambda x, w, b: dc.conv2d(x, w, b, stride=stride),
            [rng.normal(size=(2, 2, hw, hw)), rng.normal(size=(3, 2, 2, 2)), rng.normal(size=3)],
        )

    @pytest.mark.parametrize("stride", [1, 2])
    def test_convT_gradients(self, stride):
        rng = np.random.default_rng(10 + stride)
        check_grad(
            lambda x, w, b: dc.conv_transpose2d(x, w, b, stride=stride),
            [rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(3, 2, 2, 2)), rng.normal(size=2)],
        )


class TestPointwiseAndPooling:
    def test_relu_values(self):
        np.testing.assert_array_equal(dc.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])

    def test_maxpool_value(self):
        out = dc.maxpool(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2).data
        np.testing.assert_array_equal(out, [[[[4.0]]]])

    def test_maxpool_tie_goes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = dc.maxpool(x, 2, 2).sum()
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_maxpool_odd_input(self):
        assert dc.maxpool(np.zeros((1, 1, 27, 27)), 2, 2).shape == (1, 1, 13, 13)

    def test_sigmoid_gradient(self):
        check_grad(dc.sigmoid, [np.random.default_rng(0).normal(size=(4, 3)) * 3])

    def test_sigmoid_extremes_finite(self):
        out = dc.sigmoid(np.array([-1000.0, 0.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_relu_gradient(self):
        check_grad(dc.relu, [distinct(np.random.default_rng(1), (3, 5))])

    def test_maxpool_gradient(self):
        check_grad(lambda x: dc.maxpool(x, 2, 2), [distinct(np.random.default_rng(2), (2, 2, 5, 5))])
        check_grad(lambda x: dc.maxpool(x, 3, 1), [distinct(np.random.default_rng(3), (1, 2, 5, 4))])

    def test_upsample(self):
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        out = dc.upsample_nn(x, 2).data
        assert out.shape == (1, 1, 4, 4)
        np.testing.assert_array_equal(out[0, 0, :2, :2], 0.0)
        check_grad(lambda x: dc.upsample_nn(x, 2), [np.random.default_rng(4).normal(size=(2, 3, 3, 2))])

    def test_batchnorm(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 3, 2, 2)) * 2 + 1
        out = dc.batchnorm_train(x, np.ones(3), np.zeros(3)).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        check_grad(dc.batchnorm_train, [x, rng.normal(size=3), rng.normal(size=3)])

    def test_elementwise_gradients(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        check_grad(dc.add, [a, b])
        check_grad(dc.sub, [a, b])
        check_grad(dc.mul, [a, b])
        check_grad(dc.square, [a])
        check_grad(dc.exp, [a])
        check_grad(dc.absolute, [distinct(rng, (3, 4))])
        check_grad(lambda x: dc.tsum(x, axis=1), [a])
        check_grad(lambda x: dc.transpose(dc.reshape(x, (2, 6)), (1, 0)), [a])

    def test_take_repeated_indices(self):
        rng = np.random.default_rng(8)
        check_grad(lambda x: dc.take(x, [2, 0, 2], axis=1), [rng.normal(size=(2, 3))])
        check_grad(lambda x: dc.take(x, 1, axis=0), [rng.normal(size=(3, 2))])


class TestTV:
    def test_constant_is_zero(self):
        assert dc.tv_norm(np.full((5, 5, 3), 0.4)).item() == 0.0

    def test_two_jumps(self):
        img = np.array([[0.0, 1.0], [0.0, 1.0]])[..., None]
        assert dc.tv_norm(img).item() == 2.0

    def test_batched(self):
        imgs = np.stack([np.zeros((3, 3, 1)), np.eye(3)[..., None]])
        np.testing.assert_array_equal(dc.tv_norm(imgs).data, [0.0, 8.0])

    def test_subgradient_fd(self):
        check_grad(dc.tv_norm, [distinct(np.random.default_rng(7), (5, 6, 2))])

    def test_zero_difference_subgradient(self):
        x = Tensor(np.zeros((3, 3, 1)), requires_grad=True)
        with Tape() as tape:
            loss = dc.tv_norm(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 0.0)


def test_determinism():
    rng = np.random.default_rng(0)
    img, ker = rng.random((16, 16, 3)), rng.random((7, 7))
    a = dc.conv2d_full(img, ker).data
    b = dc.conv2d_full(img, ker).data
    assert a.tobytes() == b.tobytes()
