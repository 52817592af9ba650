"""
Tests for the residual U-Net baseline.
"""

import numpy as np
import pytest

from python_pat.acoustics import AcousticOperator
from python_pat.config import UnetConfig
from python_pat.exceptions import PatShapeError, PatTrainingError
from python_pat.grids import SeededRng
from python_pat.unet import (Unet, UnetWeights, apply_unet, reconstruct_unet, train_unet,
                             transfer_update_unet, unet_forward)


@pytest.fixture
def quick_cfg():
    return UnetConfig(epochs=2, batch=2, lr=1e-3, seed=4)


@pytest.fixture
def pairs(tiny_dataset):
    return (np.stack([s.x0.data for s in tiny_dataset]), np.stack([s.x_true.data for s in tiny_dataset]))


class TestForward:

    def test_zero_weights_are_relu(self, rng):
        x0 = rng.normal((16, 16))
        assert np.array_equal(unet_forward(x0, UnetWeights.zeros()), np.maximum(x0, 0.0))

    def test_output_nonnegative(self, rng):
        w = UnetWeights.initialize(SeededRng(1))
        w.tensors['scale'] = np.array(3.0)
        assert unet_forward(rng.normal((16, 16)), w).min() >= 0.0

    def test_dims_divisible_by_four(self, rng):
        with pytest.raises(PatShapeError):
            unet_forward(rng.normal((18, 16)), UnetWeights.zeros())

    def test_batched_application(self, rng):
        w = UnetWeights.initialize(SeededRng(2))
        x0 = rng.normal((5, 16, 16))
        out = apply_unet(w, x0, chunk=2)
        assert np.allclose(out[3], unet_forward(x0[3], w), atol=1e-12)

    def test_backward_needs_forward(self):
        with pytest.raises(PatTrainingError):
            Unet(UnetWeights.zeros()).backward(np.zeros((1, 16, 16)))


class TestBackward:

    def test_parameter_gradients(self, positive_images):
        w = UnetWeights.initialize(SeededRng(3))
        w.tensors['scale'] = np.array(0.5)
        x0 = positive_images((16, 16), 4)
        upstream = np.random.default_rng(5).normal(size=(1, 16, 16))
        net = Unet(w)
        net.forward(x0[None])
        grads, d_x0 = net.backward(upstream)

        def f(weights, inp=x0):
            return float(np.sum(upstream[0] * unet_forward(inp, weights)))

        picker = np.random.default_rng(12)
        h = 1e-5
        for _ in range(20):
            name = UnetWeights.names[picker.integers(len(UnetWeights.names))]
            index = tuple(picker.integers(s) for s in w[name].shape)
            plus, minus = w.copy(), w.copy()
            plus.tensors[name][index] += h
            minus.tensors[name][index] -= h
            fd = (f(plus) - f(minus)) / (2 * h)
            assert abs(fd - grads[name][index]) <= 1e-4 * max(abs(fd), abs(grads[name][index])) + 1e-8, name
        e = np.zeros((16, 16))
        e[7, 9] = h
        fd = (f(w, x0 + e) - f(w, x0 - e)) / (2 * h)
        assert abs(fd - d_x0[0, 7, 9]) <= 1e-4 * abs(fd) + 1e-8


class TestTraining:

    def test_no_worse_than_identity(self, pairs, quick_cfg):
        x0, x_true = pairs
        w, curve = train_unet(x0, x_true, quick_cfg)
        assert len(curve) == quick_cfg.epochs

        def loss(weights):
            return float(np.mean(np.sum((apply_unet(weights, x0) - x_true).reshape(len(x0), -1) ** 2, axis=1)))

        assert loss(w) <= 1.05 * loss(UnetWeights.zeros())

    def test_deterministic(self, pairs, quick_cfg):
        x0, x_true = pairs
        first, _ = train_unet(x0, x_true, quick_cfg)
        second, _ = train_unet(x0, x_true, quick_cfg)
        assert first.equals(second)
        assert first.metadata['lr'] == quick_cfg.lr

    def test_empty_set(self, quick_cfg):
        with pytest.raises(PatTrainingError):
            train_unet(np.zeros((0, 16, 16)), np.zeros((0, 16, 16)), quick_cfg)

    def test_transfer_zero_learning_rate(self, pairs, tiny_dataset, quick_cfg):
        x0, x_true = pairs
        w, _ = train_unet(x0, x_true, quick_cfg)
        updated = transfer_update_unet(w, [(s.x0, s.x_true) for s in tiny_dataset], lr=0.0, epochs=1,
                                       cfg=quick_cfg)
        assert updated.equals(w)
        assert updated.metadata['transfer'] == {'lr': 0.0, 'epochs': 1, 'n_pairs': 4}

    def test_transfer_rejects_worse_update(self, tiny_dataset, quick_cfg, monkeypatch, caplog):
        w = UnetWeights.initialize(SeededRng(1))
        x0 = np.stack([s.x0.data for s in tiny_dataset])
        targets = apply_unet(w, x0)
        pairs = [(s.x0, s.x0.with_data(t)) for s, t in zip(tiny_dataset, targets)]
        monkeypatch.setattr('python_pat.unet._fit', lambda *args, **kwargs: (UnetWeights.zeros(), []))
        with caplog.at_level('WARNING', logger='python_pat.unet'):
            updated = transfer_update_unet(w, pairs, cfg=quick_cfg)
        assert updated.equals(w)
        assert "keeping old weights" in caplog.text

    def test_transfer_needs_pairs(self, quick_cfg):
        with pytest.raises(PatTrainingError):
            transfer_update_unet(UnetWeights.zeros(), [], cfg=quick_cfg)


class TestReconstruct:

    def test_single_operator_application(self, tiny_dataset, small_geometry):
        operator = AcousticOperator(small_geometry)
        x_post, x0 = reconstruct_unet(tiny_dataset[0].y, small_geometry, UnetWeights.zeros(), operator)
        assert operator.calls == 1
        assert np.array_equal(x_post.data, np.maximum(x0.data, 0.0))
