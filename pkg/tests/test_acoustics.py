"""
Tests for the spectral propagator, the forward operator and its adjoint.
"""

import numpy as np
import pytest

from python_pat.acoustics import (AcousticOperator, data_fit_gradient, estimate_lipschitz, forward,
                                  make_geometry, make_subsampling_mask, power_iteration, propagate)
from python_pat.exceptions import PatDataError, PatShapeError
from python_pat.grids import SeededRng
from python_pat.models import ScalarField, SensorData


def dense_matrix(operator):
    """Forward operator as a dense matrix, assembled column by column."""
    dims = operator.geometry.dims
    columns = []
    for i in range(int(np.prod(dims))):
        e = np.zeros(int(np.prod(dims)))
        e[i] = 1.0
        columns.append(operator.forward(e.reshape(dims)).data.ravel())
    return np.stack(columns, axis=1)


class TestPropagate:

    def test_time_zero_is_identity(self, rng):
        x = ScalarField(rng.normal((16, 16)), 1e-4)
        assert np.max(np.abs(propagate(x, 0.0).data - x.data)) <= 1e-10

    def test_plane_wave_eigenmode(self):
        n, dx, c, t = 32, 1e-4, 1500.0, 3e-7
        rows = np.arange(n)[:, None] * np.ones((1, n))
        k = 2 * np.pi * 3 / (n * dx)
        x = ScalarField(np.cos(k * rows * dx), dx)
        expected = np.cos(c * k * t) * x.data
        assert np.max(np.abs(propagate(x, t, c).data - expected)) <= 1e-8

    def test_norm_does_not_grow(self, rng):
        x = ScalarField(rng.normal((16, 16)), 1e-4)
        for t in (1e-8, 1e-7, 5e-6):
            assert propagate(x, t).norm() <= x.norm() * (1 + 1e-12)

    def test_negative_time_rejected(self, rng):
        with pytest.raises(PatDataError):
            propagate(ScalarField(rng.normal((4, 4)), 1.0), -1.0)


class TestGeometry:

    def test_default_sensor_layout(self):
        g = make_geometry((64, 64))
        assert len(g.sensors) == 32
        assert all(s[0] == 0 for s in g.sensors)
        assert g.n_active == 32

    def test_default_time_step_traverses_domain(self):
        g = make_geometry((64, 64))
        diagonal = g.dx * np.sqrt(2) * 64
        assert np.isclose(g.sound_speed * g.n_t * g.dt, 1.5 * diagonal)

    def test_mask_outside_sensor_set_rejected(self):
        with pytest.raises(PatDataError):
            make_geometry((16, 16), mask=(0, 99))

    def test_dict_roundtrip(self, padded_geometry):
        from python_pat.models import AcousticGeometry

        assert AcousticGeometry.from_dict(padded_geometry.to_dict()) == padded_geometry


class TestForwardAdjoint:

    def test_zero_input(self, small_operator):
        assert not np.any(small_operator.forward(np.zeros((16, 16))).data)

    def test_first_time_sample_reads_sensors(self, small_geometry, small_operator, rng):
        x = rng.normal((16, 16))
        y = small_operator.forward(x)
        expected = [x[s] for s in small_geometry.active_sensors]
        assert np.allclose(y.data[:, 0], expected, atol=1e-10)

    def test_linearity(self, small_operator, rng):
        x1 = rng.normal((16, 16))
        x2 = rng.normal((16, 16))
        summed = small_operator.forward(x1 + x2).data
        separate = small_operator.forward(x1).data + small_operator.forward(x2).data
        assert np.max(np.abs(summed - separate)) <= 1e-10 * max(1.0, np.max(np.abs(summed)))

    def test_scaling(self, small_operator, rng):
        x = rng.normal((16, 16))
        assert np.allclose(small_operator.forward(3.5 * x).data, 3.5 * small_operator.forward(x).data,
                           atol=1e-10)

    def test_adjoint_of_zero(self, small_geometry, small_operator):
        y = SensorData(np.zeros((small_geometry.n_active, small_geometry.n_t)), small_geometry.dt)
        assert not np.any(small_operator.adjoint(y).data)

    @pytest.mark.parametrize('padding', [0, 8])
    def test_dot_product(self, padding):
        g = make_geometry((32, 32), dx=1e-4, sound_speed=1500.0, n_t=32, padding=padding)
        operator = AcousticOperator(g)
        rng = SeededRng(99)
        for _ in range(10):
            x = rng.normal(g.dims)
            y = SensorData(rng.normal((g.n_active, g.n_t)), g.dt)
            ax = operator.forward(x)
            lhs = np.vdot(ax.data, y.data)
            rhs = np.vdot(x, operator.adjoint(y).data)
            assert abs(lhs - rhs) / (ax.norm() * y.norm() + 1e-30) <= 1e-10

    def test_dot_product_subsampled(self, padded_geometry):
        g = padded_geometry.with_mask(make_subsampling_mask(padded_geometry, 4, SeededRng(2)))
        operator = AcousticOperator(g)
        rng = SeededRng(7)
        x = rng.normal(g.dims)
        y = SensorData(rng.normal((g.n_active, g.n_t)), g.dt)
        ax = operator.forward(x)
        assert abs(np.vdot(ax.data, y.data) - np.vdot(x, operator.adjoint(y).data)) \
            <= 1e-10 * ax.norm() * y.norm()

    def test_adjoint_is_matrix_transpose(self):
        g = make_geometry((8, 8), dx=1e-4, sound_speed=1500.0, n_t=16)
        operator = AcousticOperator(g)
        assert g.n_active == 4
        matrix = dense_matrix(operator)
        y = SeededRng(3).normal((g.n_active, g.n_t))
        adjoint = operator.adjoint(SensorData(y, g.dt)).data.ravel()
        assert np.max(np.abs(adjoint - matrix.T @ y.ravel())) <= 1e-10

    def test_subsampled_rows_match_full_forward(self, small_geometry, rng):
        mask = make_subsampling_mask(small_geometry, 2, SeededRng(4))
        x = rng.normal((16, 16))
        full = AcousticOperator(small_geometry.full_sampling()).forward(x)
        masked = AcousticOperator(small_geometry.with_mask(mask)).forward(x)
        assert np.allclose(full.data[list(mask)], masked.data, atol=1e-12)

    def test_dims_mismatch(self, small_operator):
        with pytest.raises(PatShapeError):
            small_operator.forward(np.zeros((8, 8)))

    def test_sensor_data_shape_mismatch(self, small_geometry, small_operator):
        with pytest.raises(PatShapeError):
            small_operator.adjoint(SensorData(np.zeros((3, small_geometry.n_t)), small_geometry.dt))

    def test_empty_mask(self, small_geometry):
        operator = AcousticOperator(small_geometry.with_mask(()))
        with pytest.raises(PatDataError):
            operator.forward(np.ones((16, 16)))

    def test_call_counter(self, small_geometry, rng):
        operator = AcousticOperator(small_geometry)
        y = operator.forward(rng.normal((16, 16)))
        operator.gradient(np.zeros((16, 16)), y)
        assert operator.calls == 3
        operator.reset_calls()
        assert operator.calls == 0

    def test_limited_view_depth_attenuation(self, padded_geometry):
        operator = AcousticOperator(padded_geometry)
        rows, cols = np.mgrid[0:32, 0:32]
        source = np.exp(-((rows - 16) ** 2 + (cols - 16) ** 2) / (2 * 1.5 ** 2))
        image = np.abs(operator.adjoint(operator.forward(source)).data)
        near = image[1:16].mean()
        far = image[17:32].mean()
        assert near >= far


class TestGradient:

    def test_vanishes_on_consistent_data(self, small_geometry, rng):
        x = ScalarField(rng.normal((16, 16)), small_geometry.spacing)
        y = forward(x, small_geometry)
        assert np.max(np.abs(data_fit_gradient(x, y, small_geometry).data)) <= 1e-10

    def test_matches_finite_differences(self, small_operator, small_geometry, rng):
        x = rng.normal((16, 16))
        y = SensorData(rng.normal((small_geometry.n_active, small_geometry.n_t)), small_geometry.dt)
        grad = small_operator.gradient(x, y).data
        h = 1e-4
        for _ in range(5):
            d = rng.normal((16, 16))
            fd = (small_operator.objective(x + h * d, y) - small_operator.objective(x - h * d, y)) / (2 * h)
            analytic = np.vdot(grad, d)
            assert abs(fd - analytic) <= 1e-6 * max(abs(analytic), 1.0)

    def test_joint_linearity(self, small_operator, small_geometry, rng):
        x = rng.normal((16, 16))
        y = SensorData(rng.normal((small_geometry.n_active, small_geometry.n_t)), small_geometry.dt)
        zero_y = SensorData(np.zeros_like(y.data), y.dt)
        combined = small_operator.gradient(x, y).data
        parts = small_operator.gradient(x, zero_y).data + small_operator.gradient(np.zeros((16, 16)), y).data
        assert np.max(np.abs(combined - parts)) <= 1e-10 * max(1.0, np.max(np.abs(combined)))


class TestSubsamplingMask:

    def test_factor_one_is_full(self, small_geometry):
        assert make_subsampling_mask(small_geometry, 1, SeededRng(0)) == tuple(range(8))

    def test_factor_four_on_32_sensors(self):
        g = make_geometry((64, 64))
        mask = make_subsampling_mask(g, 4, SeededRng(7))
        assert len(mask) == 8
        assert list(mask) == sorted(set(mask))

    def test_deterministic(self):
        g = make_geometry((64, 64))
        assert make_subsampling_mask(g, 4, SeededRng(7)) == make_subsampling_mask(g, 4, SeededRng(7))

    @pytest.mark.parametrize('factor', [0, 9])
    def test_invalid_factor(self, small_geometry, factor):
        with pytest.raises(PatDataError):
            make_subsampling_mask(small_geometry, factor, SeededRng(0))


class TestLipschitz:

    def test_identity_operator(self, small_geometry):
        estimate = estimate_lipschitz(small_geometry, 5, SeededRng(1), normal_op=lambda v: v)
        assert abs(estimate - 1.0) <= 1e-10

    def test_dense_eigenvalue(self):
        g = make_geometry((8, 8), dx=1e-4, sound_speed=1500.0, n_t=16)
        matrix = dense_matrix(AcousticOperator(g))
        largest = np.linalg.eigvalsh(matrix.T @ matrix)[-1]
        estimate = estimate_lipschitz(g, 50, SeededRng(5))
        assert abs(estimate - largest) <= 0.01 * largest

    def test_rayleigh_quotients_nondecreasing(self, small_operator, small_geometry):
        history = power_iteration(small_operator.normal, small_geometry.dims, 20, SeededRng(8))
        scale = max(history)
        assert all(b >= a - 1e-12 * scale for a, b in zip(history, history[1:]))

    def test_needs_an_iteration(self, small_geometry):
        with pytest.raises(PatDataError):
            estimate_lipschitz(small_geometry, 0, SeededRng(1))
