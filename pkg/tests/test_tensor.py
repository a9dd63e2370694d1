"""
Tests for the tape autodiff core and the array kernels.
"""

import numpy as np
import pytest

from dual_branch_sam.exceptions import ConfigurationError, ContractError, DimensionError
from dual_branch_sam.tensor import (
    Tape,
    Tensor,
    backward,
    batch_norm,
    bilinear_sample,
    conv2d,
    conv_transpose2d,
    depthwise_conv2d,
    drop_path,
    dropout,
    gelu,
    layer_norm,
    no_grad,
    relu,
    sample_bilinear_array,
    sigmoid,
    softmax,
)
from dual_branch_sam.tensor.gradcheck import analytic_gradient, finite_diff_check


# ============================================================================
# Tensor operations
# ============================================================================


class TestTensorOps:
    def test_integer_data_promoted_to_float64(self):
        assert Tensor([1, 2, 3]).dtype == np.float64

    def test_matmul_examples(self):
        a = Tensor([[1.0, 2.0]])
        b = Tensor([[3.0], [4.0]])
        assert (a @ b).data.tolist() == [[11.0]]
        eye = Tensor(np.eye(3))
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal((x @ eye).data, x.data)

    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_broadcast_add_gradient_is_reduced(self, rng):
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        with Tape():
            backward((x + b).sum())
        np.testing.assert_array_equal(b.grad, np.full(3, 4.0))
        np.testing.assert_array_equal(x.grad, np.ones((4, 3)))


# ============================================================================
# Backward
# ============================================================================


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Tape():
            backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_half_square_gives_identity(self, rng):
        x = Tensor(rng.normal(size=(5,)), requires_grad=True)
        with Tape():
            backward((x * x).sum() * 0.5)
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            with pytest.raises(ContractError):
                backward(x * 2.0)

    def test_constants_never_receive_gradients(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        c = Tensor(rng.normal(size=3))
        with Tape():
            backward((x * c).sum())
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, c.data)

    def test_gradients_accumulate_across_calls(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        for _ in range(2):
            with Tape():
                backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_no_grad_records_nothing(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                y = (x * x).sum()
            assert len(tape) == 0
        assert not y.requires_grad

    def test_reused_intermediate(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        with Tape():
            y = x * 3.0
            backward((y * y).sum())
        np.testing.assert_allclose(x.grad, 18.0 * x.data, rtol=1e-14)

    def test_composite_graph_matches_finite_differences(self, rng):
        w = Tensor(rng.normal(size=(4, 3, 3, 3)))
        gamma = Tensor(rng.normal(1.0, 0.1, size=6))
        beta = Tensor(rng.normal(size=6))
        proj = rng.normal(size=(2, 4, 6, 6))

        def f(x):
            h = conv2d(x, w, pad=1)
            return (gelu(layer_norm(h, gamma, beta)) * Tensor(proj)).sum()

        x = Tensor(rng.normal(size=(2, 3, 6, 6)))
        assert finite_diff_check(f, x, max_coords=40, rng=rng) < 1e-4


# ============================================================================
# Finite-difference checker
# ============================================================================


class TestFiniteDiffCheck:
    def test_quadratic_form(self, rng):
        a = rng.normal(size=(4, 4))
        a = Tensor(a @ a.T)
        x = Tensor(rng.normal(size=(4, 1)))
        assert finite_diff_check(lambda t: (t.transpose(1, 0) @ a @ t).sum(), x) < 1e-6

    def test_detects_doubled_gradient(self, rng):
        x = Tensor(rng.normal(size=6))

        def f(t):
            return (t * t).sum()

        grad = analytic_gradient(f, x) * 2.0
        assert finite_diff_check(f, x, grad=grad) == pytest.approx(0.5, abs=1e-6)

    def test_input_restored(self, rng):
        values = rng.normal(size=5)
        x = Tensor(values.copy())
        finite_diff_check(lambda t: (t * t).sum(), x)
        np.testing.assert_array_equal(x.data, values)


# ============================================================================
# Convolutions
# ============================================================================


class TestConv2d:
    def test_ones_kernel_counts_neighbours(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, pad=1).data[0, 0]
        np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_one_by_one_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        np.testing.assert_allclose(conv2d(x, w).data, x.data, rtol=1e-15)

    def test_bias_broadcast(self, rng):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor([1.0, -2.0, 0.5])
        out = conv2d(x, w, b, pad=1).data
        for o in range(3):
            np.testing.assert_array_equal(out[0, o], np.full((4, 4), b.data[o]))

    def test_non_exact_extent_rejected(self):
        with pytest.raises(ConfigurationError):
            conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=1)

    def test_asymmetric_padding_output_extent(self):
        out = conv2d(Tensor(np.ones((1, 1, 8, 8))), Tensor(np.ones((2, 1, 3, 3))), stride=2, pad=(1, 0, 1, 0))
        assert out.shape == (1, 2, 4, 4)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, (1, 0, 1, 0))])
    def test_gradients(self, rng, stride, pad):
        x = Tensor(rng.normal(size=(2, 3, 6, 6)))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)))
        b = Tensor(rng.normal(size=4))
        projection = None

        def f(_):
            nonlocal projection
            out = conv2d(x, w, b, stride=stride, pad=pad)
            if projection is None:
                projection = Tensor(rng.normal(size=out.shape))
            return (out * projection).sum()

        for target in (x, w, b):
            assert finite_diff_check(f, target) < 1e-5


class TestDepthwiseConv2d:
    def test_delta_kernel_is_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        w = np.zeros((3, 3, 3))
        w[:, 1, 1] = 1.0
        np.testing.assert_array_equal(depthwise_conv2d(x, Tensor(w), pad=1).data, x.data)

    def test_no_channel_mixing(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        w = np.zeros((2, 3, 3))
        w[0, 1, 1] = 1.0
        out = depthwise_conv2d(x, Tensor(w), pad=1).data
        np.testing.assert_array_equal(out[0, 1], np.zeros((4, 4)))

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        w = Tensor(rng.normal(size=(3, 3, 3)))
        projection = Tensor(rng.normal(size=(2, 3, 5, 5)))

        def f(_):
            return (depthwise_conv2d(x, w, pad=1) * projection).sum()

        assert finite_diff_check(f, x) < 1e-5
        assert finite_diff_check(f, w) < 1e-5


class TestConvTranspose2d:
    def test_output_extent_doubles(self, rng):
        out = conv_transpose2d(Tensor(rng.normal(size=(1, 4, 3, 3))), Tensor(rng.normal(size=(4, 2, 2, 2))))
        assert out.shape == (1, 2, 6, 6)

    def test_single_pixel_stamps_kernel(self):
        x = np.zeros((1, 1, 2, 2))
        x[0, 0, 1, 0] = 2.0
        w = np.arange(4.0).reshape(1, 1, 2, 2)
        out = conv_transpose2d(Tensor(x), Tensor(w)).data[0, 0]
        expected = np.zeros((4, 4))
        expected[2:4, 0:2] = 2.0 * w[0, 0]
        np.testing.assert_array_equal(out, expected)

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 3, 3)))
        w = Tensor(rng.normal(size=(3, 2, 2, 2)))
        projection = Tensor(rng.normal(size=(2, 2, 6, 6)))

        def f(_):
            return (conv_transpose2d(x, w) * projection).sum()

        assert finite_diff_check(f, x) < 1e-5
        assert finite_diff_check(f, w) < 1e-5


# ============================================================================
# Normalizations and activations
# ============================================================================


class TestNormalization:
    def test_layer_norm_constant_rows_are_zero(self):
        out = layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_layer_norm_zero_gamma_returns_beta(self, rng):
        beta = rng.normal(size=4)
        out = layer_norm(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(4)), Tensor(beta))
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (3, 4)))

    def test_layer_norm_statistics(self, rng):
        out = layer_norm(Tensor(rng.normal(2.0, 3.0, size=(4, 64))), Tensor(np.ones(64)), Tensor(np.zeros(64)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.std(axis=-1), 1.0, atol=1e-4)

    def test_layer_norm_shape_mismatch(self):
        with pytest.raises(DimensionError):
            layer_norm(Tensor(np.ones((2, 5))), Tensor(np.ones(4)), Tensor(np.zeros(4)))

    def test_batch_norm_constant_channel_is_zero(self):
        x = np.zeros((2, 2, 3, 3))
        x[:, 0] = 5.0
        x[:, 1] = -1.0
        rm, rv = np.zeros(2), np.ones(2)
        out = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
        np.testing.assert_array_equal(out.data, np.zeros_like(x))

    def test_batch_norm_updates_running_stats_only_in_training(self, rng):
        x = Tensor(rng.normal(1.0, 2.0, size=(4, 3, 5, 5)))
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        rm, rv = np.zeros(3), np.ones(3)
        batch_norm(x, gamma, beta, rm, rv, training=True, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)), rtol=1e-12)
        frozen_mean, frozen_var = rm.copy(), rv.copy()
        batch_norm(x, gamma, beta, rm, rv, training=False)
        np.testing.assert_array_equal(rm, frozen_mean)
        np.testing.assert_array_equal(rv, frozen_var)

    def test_batch_norm_fresh_buffers_in_eval(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3),
                         training=False, eps=1e-5)
        np.testing.assert_allclose(out.data, x / np.sqrt(1.0 + 1e-5), rtol=1e-12)


class TestActivations:
    def test_sigmoid_at_zero_and_extremes(self):
        out = sigmoid(Tensor([0.0, 800.0, -800.0])).data
        assert out[0] == 0.5
        assert out[1] == 1.0
        assert out[2] == 0.0
        assert np.all(np.isfinite(out))

    def test_softmax_of_constants_is_uniform(self):
        np.testing.assert_allclose(softmax(Tensor(np.full((2, 5), 7.0))).data, 0.2, rtol=1e-15)

    def test_softmax_rows_sum_to_one(self, rng):
        np.testing.assert_allclose(softmax(Tensor(rng.normal(size=(3, 7)) * 50)).data.sum(axis=-1), 1.0)

    def test_gelu_values(self):
        out = gelu(Tensor([0.0, 1.0, -1.0])).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(0.8413447460685429, rel=1e-12)
        assert out[1] - out[2] == pytest.approx(1.0, rel=1e-12)

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    @pytest.mark.parametrize("fn", [sigmoid, gelu, softmax])
    def test_gradients(self, rng, fn):
        x = Tensor(rng.normal(size=(3, 4)))
        projection = Tensor(rng.normal(size=(3, 4)))
        assert finite_diff_check(lambda t: (fn(t) * projection).sum(), x) < 1e-5

    def test_dropout_identity_in_eval(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        assert dropout(x, 0.5, training=False, rng=rng) is x
        assert drop_path(x, 0.5, training=False, rng=rng) is x

    def test_drop_path_drops_whole_samples(self, rng):
        x = Tensor(np.ones((64, 3, 2)))
        out = drop_path(x, 0.5, training=True, rng=rng).data
        per_sample = out.reshape(64, -1)
        assert set(np.unique(per_sample)) <= {0.0, 2.0}
        assert np.all(per_sample.min(axis=1) == per_sample.max(axis=1))


# ============================================================================
# Bilinear sampling
# ============================================================================


class TestBilinearSample:
    def test_pixel_centres_reproduce_pixels(self, rng):
        image = rng.normal(size=(1, 2, 4, 4))
        ii, jj = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
        points = np.stack([(jj.ravel() + 0.5) / 4, (ii.ravel() + 0.5) / 4], axis=-1)[None]
        out = bilinear_sample(Tensor(image), Tensor(points)).data
        np.testing.assert_array_equal(out[0], image[0].reshape(2, -1).T)

    def test_midpoint_averages_neighbours(self, rng):
        image = rng.normal(size=(1, 1, 4, 4))
        out = bilinear_sample(Tensor(image), Tensor([[[2.0 / 4, 1.5 / 4]]])).data
        assert out[0, 0, 0] == pytest.approx(0.5 * (image[0, 0, 1, 1] + image[0, 0, 1, 2]), rel=1e-12)

    def test_outside_reads_zero(self):
        image = Tensor(np.ones((1, 1, 3, 3)))
        out = bilinear_sample(image, Tensor([[[-1.0, 0.5], [0.5, 2.0]]])).data
        np.testing.assert_array_equal(out, np.zeros((1, 2, 1)))

    def test_border_half_weight(self):
        image = Tensor(np.ones((1, 1, 4, 4)))
        # half a pixel left of the first column centre
        out = bilinear_sample(image, Tensor([[[0.0, 0.5]]])).data
        assert out[0, 0, 0] == pytest.approx(0.5)

    def test_point_gradient_on_ramp(self, rng):
        width = 5
        ramp = np.broadcast_to(np.arange(width, dtype=np.float64), (1, 1, 4, width)).copy()
        points = Tensor(rng.uniform(0.2, 0.8, size=(1, 6, 2)))
        grad = analytic_gradient(lambda p: bilinear_sample(Tensor(ramp), p).sum(), points)
        np.testing.assert_allclose(grad[..., 0], width, rtol=1e-12)
        np.testing.assert_allclose(grad[..., 1], 0.0, atol=1e-12)

    def test_gradients(self, rng):
        image = Tensor(rng.normal(size=(2, 3, 4, 5)))
        points = Tensor(rng.uniform(-0.1, 1.1, size=(2, 7, 2)))
        projection = Tensor(rng.normal(size=(2, 7, 3)))

        def f(_):
            return (bilinear_sample(image, points) * projection).sum()

        assert finite_diff_check(f, image) < 1e-5
        assert finite_diff_check(f, points) < 1e-5

    def test_array_sampler_matches_kernel_inside(self, rng):
        image = rng.normal(size=(1, 2, 6, 6))
        points = rng.uniform(0.1, 0.9, size=(1, 9, 2))
        np.testing.assert_array_equal(
            sample_bilinear_array(image, points, clamp=True),
            bilinear_sample(Tensor(image), Tensor(points)).data,
        )

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            bilinear_sample(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((2, 4, 2))))
