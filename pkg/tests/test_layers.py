"""
Tests for the convolution layers, the DGD block, the losses and Adam.

Gradient checks run in double precision with central differences.
"""

import numpy as np
import pytest

from python_pat.exceptions import PatShapeError, PatTrainingError
from python_pat.grids import SeededRng
from python_pat.layers import (DGD_LAMBDA_INIT, AdamState, ConvLayer, DgdBlock, StageWeights, adam_step,
                               batches, conv_backward, conv_forward, default_loss_beta, dgd_block_backward,
                               dgd_block_forward, init_weights, loss_and_grad, max_pool_backward,
                               max_pool_forward, upsample_nearest, upsample_nearest_backward)


def naive_conv(x, kernels, bias):
    """Direct nested-loop same-size correlation with zero padding."""
    c_out, c_in, kh, kw = kernels.shape
    _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = bias[o] + np.sum(kernels[o] * padded[:, i:i + kh, j:j + kw])
    return out


def close(a, b, rel=1e-4, floor=1e-8):
    return abs(a - b) <= rel * max(abs(a), abs(b)) + floor


class TestConv:

    def test_identity_kernel(self, rng):
        kernels = np.zeros((1, 1, 5, 5))
        kernels[0, 0, 2, 2] = 1.0
        x = rng.normal((1, 9, 9))
        assert np.array_equal(conv_forward(x, ConvLayer(kernels, np.zeros(1))), x)

    def test_bias_only(self, rng):
        layer = ConvLayer(np.zeros((2, 1, 3, 3)), np.array([0.5, -1.0]))
        out = conv_forward(rng.normal((1, 6, 6)), layer)
        assert np.all(out[0] == 0.5) and np.all(out[1] == -1.0)

    def test_matches_nested_loops(self, rng):
        kernels = rng.normal((2, 1, 5, 5))
        bias = rng.normal(2)
        x = rng.normal((1, 7, 7))
        out = conv_forward(x, ConvLayer(kernels, bias))
        assert np.max(np.abs(out - naive_conv(x, kernels, bias))) <= 1e-12

    def test_batched_matches_single(self, rng):
        layer = ConvLayer(rng.normal((3, 2, 3, 3)), rng.normal(3))
        x = rng.normal((4, 2, 6, 6))
        batched = conv_forward(x, layer)
        for b in range(4):
            assert np.allclose(batched[b], conv_forward(x[b], layer), atol=1e-13)

    def test_channel_mismatch(self, rng):
        with pytest.raises(PatShapeError):
            conv_forward(rng.normal((2, 5, 5)), ConvLayer(np.zeros((1, 1, 3, 3)), np.zeros(1)))

    def test_even_kernel_rejected(self):
        with pytest.raises(PatShapeError):
            ConvLayer(np.zeros((1, 1, 4, 4)), np.zeros(1))

    def test_backward_matches_finite_differences(self, rng):
        layer = ConvLayer(rng.normal((2, 2, 3, 3)), rng.normal(2))
        x = rng.normal((1, 2, 5, 5))
        upstream = rng.normal((1, 2, 5, 5))
        d_w, d_b, d_x = conv_backward(x, layer, upstream)

        def f(kernels, bias, inp):
            return float(np.sum(upstream * conv_forward(inp, ConvLayer(kernels, bias))))

        h = 1e-6
        e = np.zeros_like(layer.kernels)
        e[1, 0, 2, 1] = h
        fd = (f(layer.kernels + e, layer.bias, x) - f(layer.kernels - e, layer.bias, x)) / (2 * h)
        assert close(fd, d_w[1, 0, 2, 1], 1e-6)
        e = np.zeros_like(x)
        e[0, 1, 0, 3] = h
        fd = (f(layer.kernels, layer.bias, x + e) - f(layer.kernels, layer.bias, x - e)) / (2 * h)
        assert close(fd, d_x[0, 1, 0, 3], 1e-6)
        assert np.allclose(d_b, upstream.sum(axis=(0, 2, 3)))


class TestPooling:

    def test_max_pool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out, mask = max_pool_forward(x)
        assert np.array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])
        assert mask.sum() == 4

    def test_ties_route_to_one_voxel(self):
        out, mask = max_pool_forward(np.ones((1, 1, 2, 2)))
        assert out[0, 0, 0, 0] == 1.0
        assert mask.sum() == 1

    def test_pool_backward(self, rng):
        x = rng.normal((2, 3, 4, 6))
        _, mask = max_pool_forward(x)
        upstream = rng.normal((2, 3, 2, 3))
        grad = max_pool_backward(mask, upstream)
        assert grad.shape == x.shape
        assert np.isclose(grad.sum(), upstream.sum())

    def test_odd_extent(self):
        with pytest.raises(PatShapeError):
            max_pool_forward(np.zeros((1, 1, 3, 4)))

    def test_upsample_adjoint(self, rng):
        a = rng.normal((1, 2, 3, 3))
        b = rng.normal((1, 2, 6, 6))
        assert np.isclose(np.vdot(upsample_nearest(a), b), np.vdot(a, upsample_nearest_backward(b)))


class TestDgdBlock:

    def test_zero_weights_are_identity(self, positive_images):
        x = positive_images((9, 9))
        g = positive_images((9, 9), seed=1) - 1.0
        assert np.array_equal(dgd_block_forward(x, g, StageWeights.zeros()), x)

    def test_zero_gate_is_relu(self, rng):
        theta = init_weights(SeededRng(3), lam=0.0)
        x = rng.normal((9, 9))
        assert np.array_equal(dgd_block_forward(x, rng.normal((9, 9)), theta), np.maximum(x, 0.0))

    def test_output_nonnegative(self, rng):
        theta = init_weights(SeededRng(4), lam=5.0)
        out = dgd_block_forward(rng.normal((9, 9)), rng.normal((9, 9)), theta)
        assert out.min() >= 0.0

    def test_shape_mismatch(self, rng):
        with pytest.raises(PatShapeError):
            dgd_block_forward(rng.normal((9, 9)), rng.normal((8, 9)), StageWeights.zeros())

    def test_backward_needs_forward(self):
        with pytest.raises(PatTrainingError):
            DgdBlock(StageWeights.zeros()).backward(np.zeros((1, 9, 9)))

    def test_zero_upstream(self, positive_images):
        theta = init_weights(SeededRng(5))
        grads, d_x, d_g = dgd_block_backward(positive_images((9, 9)), positive_images((9, 9), 1),
                                             theta, np.zeros((9, 9)))
        assert all(not np.any(g) for g in grads.values())
        assert not np.any(d_x) and not np.any(d_g)

    def test_parameter_gradients(self, positive_images):
        theta = init_weights(SeededRng(6), lam=0.5)
        x = positive_images((9, 9), 2)
        g = positive_images((9, 9), 3) - 1.0
        upstream = np.random.default_rng(4).normal(size=(9, 9))
        grads, _, _ = dgd_block_backward(x, g, theta, upstream)

        def f(weights):
            return float(np.sum(upstream * dgd_block_forward(x, g, weights)))

        picker = np.random.default_rng(11)
        h = 1e-5
        for _ in range(20):
            name = StageWeights.names[picker.integers(len(StageWeights.names))]
            index = tuple(picker.integers(s) for s in theta[name].shape)
            plus, minus = theta.copy(), theta.copy()
            plus.tensors[name][index] += h
            minus.tensors[name][index] -= h
            fd = (f(plus) - f(minus)) / (2 * h)
            assert close(fd, grads[name][index]), name

    def test_input_gradients(self, positive_images):
        theta = init_weights(SeededRng(7), lam=0.5)
        x = positive_images((9, 9), 5)
        g = positive_images((9, 9), 6) - 1.0
        upstream = np.random.default_rng(8).normal(size=(9, 9))
        _, d_x, d_g = dgd_block_backward(x, g, theta, upstream)
        h = 1e-5
        for index in [(0, 0), (4, 4), (8, 2)]:
            e = np.zeros((9, 9))
            e[index] = h
            fd_x = (np.sum(upstream * dgd_block_forward(x + e, g, theta))
                    - np.sum(upstream * dgd_block_forward(x - e, g, theta))) / (2 * h)
            fd_g = (np.sum(upstream * dgd_block_forward(x, g + e, theta))
                    - np.sum(upstream * dgd_block_forward(x, g - e, theta))) / (2 * h)
            assert close(fd_x, d_x[index])
            assert close(fd_g, d_g[index])

    def test_gate_gradient_oracle(self, positive_images):
        theta = init_weights(SeededRng(8), lam=0.3)
        x = positive_images((9, 9), 1)
        g = positive_images((9, 9), 2)
        upstream = np.ones((9, 9))
        block = DgdBlock(theta)
        out = block.forward(x[None], g[None])
        grads, _, _ = block.backward(upstream[None])
        update = block._cache.post['update'][0]
        active = (x + theta.lam * update) > 0
        assert np.isclose(grads['lambda'], np.sum(upstream * active * update))
        assert out.shape == (1, 9, 9)

    def test_translation_equivariance(self, positive_images):
        theta = init_weights(SeededRng(9))
        x = positive_images((24, 24), 1)
        g = positive_images((24, 24), 2) - 1.0
        out = dgd_block_forward(x, g, theta)
        shifted = dgd_block_forward(np.roll(x, 1, axis=1), np.roll(g, 1, axis=1), theta)
        interior = (slice(10, 14), slice(10, 14))
        assert np.allclose(np.roll(out, 1, axis=1)[interior], shifted[interior], atol=1e-12)


class TestInitialisation:

    def test_deterministic(self):
        assert init_weights(SeededRng(1)).equals(init_weights(SeededRng(1)))

    def test_biases_zero_and_gate(self):
        theta = init_weights(SeededRng(2))
        assert all(not np.any(theta[n]) for n in theta.names if n.endswith('.b'))
        assert theta.lam == DGD_LAMBDA_INIT

    def test_he_variance(self):
        theta = init_weights(SeededRng(3))
        kernels = theta['x2.w']
        expected = 2.0 / (16 * 25)
        assert abs(kernels.var() - expected) <= 0.2 * expected

    def test_channel_plan_enforced(self):
        tensors = dict(StageWeights.zeros().tensors)
        tensors['x2.w'] = np.zeros((8, 16, 5, 5))
        with pytest.raises(PatShapeError):
            StageWeights(tensors)


class TestLoss:

    def test_perfect_match(self, rng):
        x = rng.normal((5, 5))
        loss, grad = loss_and_grad(x, x, stage0=False)
        assert loss == 0.0 and not np.any(grad)

    def test_norm_penalty_at_zero(self):
        zero = np.zeros((4, 4))
        loss, _ = loss_and_grad(zero, zero, stage0=True, alpha=0.01)
        assert loss == pytest.approx(0.01 * default_loss_beta(16))

    def test_penalty_only_below_beta(self, rng):
        x = rng.normal((4, 4)) + 5.0
        plain, _ = loss_and_grad(x, np.zeros((4, 4)), stage0=False)
        staged, _ = loss_and_grad(x, np.zeros((4, 4)), stage0=True)
        assert plain == staged

    def test_gradient_matches_finite_differences(self, rng):
        x = rng.normal((4, 4)) * 0.05
        target = rng.normal((4, 4))
        _, grad = loss_and_grad(x, target, stage0=True, alpha=0.5, beta=2.0)
        h = 1e-6
        for index in [(0, 0), (1, 3), (3, 2)]:
            e = np.zeros((4, 4))
            e[index] = h
            fd = (loss_and_grad(x + e, target, True, 0.5, 2.0)[0]
                  - loss_and_grad(x - e, target, True, 0.5, 2.0)[0]) / (2 * h)
            assert abs(fd - grad[index]) <= 1e-6 * max(1.0, abs(fd))


class TestAdam:

    def test_zero_gradient(self):
        params = {'w': np.array([1.0, -2.0])}
        out = adam_step(params, {'w': np.zeros(2)}, AdamState(lr=0.1))
        assert np.array_equal(out['w'], params['w'])

    def test_first_step(self):
        out = adam_step({'w': np.array(0.0)}, {'w': np.array(1.0)}, AdamState(lr=0.1))
        assert float(out['w']) == pytest.approx(-0.1 / (1.0 + 1e-8), rel=1e-12)

    def test_deterministic_trajectory(self):
        def run():
            state = AdamState(lr=0.01)
            params = {'w': np.array([0.5, 0.5])}
            for step in range(3):
                params = adam_step(params, {'w': np.array([1.0, -0.5]) * (step + 1)}, state)
            return params['w']
        assert np.array_equal(run(), run())

    def test_non_finite_gradient(self):
        with pytest.raises(PatTrainingError):
            adam_step({'w': np.zeros(2)}, {'w': np.array([np.nan, 0.0])}, AdamState(lr=0.1))

    def test_shape_mismatch(self):
        with pytest.raises(PatShapeError):
            adam_step({'w': np.zeros(2)}, {'w': np.zeros(3)}, AdamState(lr=0.1))


class TestBatches:

    def test_epoch_covers_every_sample(self):
        order = np.concatenate(batches(5, 2, SeededRng(0)))
        assert sorted(order) == [0, 1, 2, 3, 4]
