"""Tensor core: op semantics, stability, and gradient checks."""

import numpy as np
import numpy.testing as npt
import pytest

from gwsm.errors import ContractError, ShapeError
from gwsm.tensor import (Tensor, avg_pool2, check_gradients, concat_channels,
                         conv2d, conv2d_naive, global_average_pool, matmul,
                         max_pool2, mean_over_channels, no_grad, relu,
                         row_softmax, sigmoid, sigmoid_cross_entropy, tanh,
                         tmean, transpose, tsum)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        npt.assert_array_equal(matmul(eye, eye).data, np.eye(2))

    def test_hand_multiplied(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        npt.assert_array_equal(matmul(a, b).data, [[2.0], [4.0]])

    def test_zero_annihilates_and_kills_grad(self):
        a = Tensor(np.random.default_rng(0).normal(size=(3, 4)),
                   requires_grad=True)
        b = Tensor(np.zeros((4, 2)))
        out = matmul(a, b)
        npt.assert_array_equal(out.data, np.zeros((3, 2)))
        out.sum().backward()
        npt.assert_array_equal(a.grad, np.zeros((3, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestRowSoftmax:
    def test_uniform_on_zeros(self):
        out = row_softmax(Tensor(np.zeros((2, 3))))
        npt.assert_allclose(out.data, np.full((2, 3), 1.0 / 3.0), atol=1e-15)

    def test_closed_form(self):
        out = row_softmax(Tensor([[0.0, np.log(3.0)]]))
        npt.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 5))
        for c in (-7.0, 3.0, 1e6):
            npt.assert_allclose(row_softmax(Tensor(x)).data,
                                row_softmax(Tensor(x + c)).data, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            x = rng.normal(scale=rng.uniform(0.1, 50), size=(6, 8))
            sums = row_softmax(Tensor(x)).data.sum(axis=1)
            npt.assert_allclose(sums, 1.0, atol=1e-12)


class TestConv2d:
    def test_one_by_one_identity_kernel(self):
        x = Tensor(np.random.default_rng(3).normal(size=(1, 4, 4)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        npt.assert_array_equal(conv2d(x, w).data, x.data)

    def test_averaging_kernel_on_constant(self):
        c = 2.5
        x = Tensor(np.full((1, 6, 6), c))
        w = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
        out = conv2d(x, w, padding=1)
        npt.assert_allclose(out.data[0, 1:-1, 1:-1], c, atol=1e-12)
        # zero padding attenuates borders: corner sees 4 of 9 taps
        npt.assert_allclose(out.data[0, 0, 0], c * 4.0 / 9.0, atol=1e-12)
        npt.assert_allclose(out.data[0, 0, 1], c * 6.0 / 9.0, atol=1e-12)

    def test_dilated_preserves_spatial_size(self):
        x = Tensor(np.random.default_rng(4).normal(size=(2, 8, 8)))
        w = Tensor(np.random.default_rng(5).normal(size=(3, 2, 3, 3)))
        assert conv2d(x, w, padding=2, dilation=2).shape == (3, 8, 8)

    @pytest.mark.parametrize("stride,padding,dilation", [
        (1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 2, 2),
    ])
    def test_matches_naive_loops(self, stride, padding, dilation):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 5, 5))
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)
        fast = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride,
                      padding=padding, dilation=dilation).data
        slow = conv2d_naive(x, w, b, stride=stride, padding=padding,
                            dilation=dilation)
        npt.assert_allclose(fast, slow, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractError):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


class TestElementwiseAndReductions:
    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_saturation_is_finite(self):
        out = sigmoid(Tensor([-1e4, 1e4])).data
        assert np.all(np.isfinite(out))
        npt.assert_allclose(out, [0.0, 1.0], atol=1e-12)

    def test_gap_of_constant(self):
        out = global_average_pool(Tensor(np.full((3, 4, 4), 1.75)))
        npt.assert_allclose(out.data, [1.75] * 3, atol=1e-15)

    def test_mean_over_channels(self):
        x = Tensor(np.stack([np.full((1, 1), 1.0), np.full((1, 1), 3.0)]))
        npt.assert_allclose(mean_over_channels(x).data, [[2.0]], atol=1e-15)

    def test_pooling_shapes(self):
        x = Tensor(np.arange(32, dtype=float).reshape(2, 4, 4))
        assert avg_pool2(x).shape == (2, 2, 2)
        assert max_pool2(x).shape == (2, 2, 2)

    def test_max_pool_values(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        npt.assert_array_equal(max_pool2(x).data, [[[4.0]]])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(7).normal(size=(3, 2)),
                   requires_grad=True)
        tsum(x).backward()
        npt.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_quadratic(self):
        x = Tensor(np.random.default_rng(8).normal(size=5), requires_grad=True)
        (x * x).sum().backward()
        npt.assert_allclose(x.grad, 2 * x.data, atol=1e-15)

    def test_second_backward_errors(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = x.sum()
        loss.backward()
        with pytest.raises(ContractError):
            loss.backward()

    def test_non_scalar_loss_errors(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_diamond_graph_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x + x
        (y * y).sum().backward()  # d/dx (2x)^2 = 8x
        npt.assert_allclose(x.grad, [24.0], atol=1e-12)

    def test_no_grad_suppresses_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert y._grad_fn is None and not y.requires_grad


class TestCheckGradients:
    def test_linear_function_is_exact(self):
        x = Tensor(np.random.default_rng(9).normal(size=(3, 4)))
        assert check_gradients(lambda t: tsum(t), x) < 1e-10

    def test_sigmoid_ce_logits(self):
        rng = np.random.default_rng(10)
        logits = Tensor(rng.normal(size=6))
        label = np.array([1, 0, 1, 0, 0, 1.0])
        err = check_gradients(
            lambda t: sigmoid_cross_entropy(t, label), logits, eps=1e-5)
        assert err < 1e-6

    @pytest.mark.parametrize("name,fn", [
        ("relu_mix", lambda t: (relu(t) * Tensor(_mix(0))).sum()),
        ("sigmoid", lambda t: (sigmoid(t) * Tensor(_mix(1))).sum()),
        ("tanh", lambda t: (tanh(t) * Tensor(_mix(2))).sum()),
        ("mean", tmean),
        ("softmax_mix", lambda t: (row_softmax(t.reshape(4, 5))
                                   * Tensor(_mix(3).reshape(4, 5))).sum()),
        ("transpose_mix", lambda t: (transpose(t.reshape(4, 5))
                                     * Tensor(_mix(4).reshape(5, 4))).sum()),
    ])
    def test_each_op_under_1e4(self, name, fn):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=20))
        assert check_gradients(fn, x) < 1e-4

    def test_pool_and_conv_composite(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(size=(2, 8, 8)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        mix = Tensor(rng.normal(size=(3,)))

        def f(t):
            y = avg_pool2(max_pool2(relu(conv2d(t, w, padding=1))))
            return (global_average_pool(y) * mix).sum()

        assert check_gradients(f, x) < 1e-4

    def test_concat_channels(self):
        rng = np.random.default_rng(13)
        a = Tensor(rng.normal(size=(2, 3, 3)))
        mix = Tensor(rng.normal(size=(4, 3, 3)))

        def f(t):
            return (concat_channels([t, t]) * mix).sum()

        assert check_gradients(f, a) < 1e-4


def _mix(seed):
    return np.random.default_rng(100 + seed).normal(size=20)


class TestFiniteness:
    def test_softmax_huge_inputs(self):
        out = row_softmax(Tensor([[1e8, -1e8, 0.0]])).data
        assert np.all(np.isfinite(out))

    def test_ce_huge_logits(self):
        val = sigmoid_cross_entropy(Tensor([1e4, -1e4]),
                                    np.array([0.0, 1.0])).item()
        assert np.isfinite(val)
        npt.assert_allclose(val, 1e4, rtol=1e-12)
