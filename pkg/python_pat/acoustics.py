"""
Limited-view photoacoustic forward operator, its exact adjoint and the data-fit gradient.

Propagation uses the exact spectral solution of the homogeneous wave equation
with zero initial velocity, ``p(k, t) = x(k) cos(c0 |k| t)``. The cosine
multiplier is real and even in k, so every time slice is a real symmetric
operator and the discrete adjoint is exact up to FFT roundoff.
"""

import logging
import threading
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .exceptions import PatDataError, PatShapeError
from .grids import SeededRng, fft_forward, fft_inverse, wavenumber_magnitudes
from .models import AcousticGeometry, SamplingMask, ScalarField, SensorData

logger = logging.getLogger(__name__)

DEFAULT_SOUND_SPEED = 1580.0
DEFAULT_DX = 84.75e-6

FieldLike = Union[ScalarField, np.ndarray]


def propagate(x: ScalarField, t: float, sound_speed: float = DEFAULT_SOUND_SPEED) -> ScalarField:
    """
    Pressure field at time ``t`` for initial pressure ``x`` on its own periodic grid.

    Args:
        x: Initial pressure
        t: Time in seconds (t >= 0)
        sound_speed: Homogeneous sound speed c0 in m/s

    Returns:
        The propagated field on the same grid
    """
    if t < 0:
        raise PatDataError(f"propagation time must be non-negative, got {t}")
    spectrum = fft_forward(x)
    spectrum.coefficients = spectrum.coefficients * np.cos(sound_speed * spectrum.wavenumbers * t)
    return fft_inverse(spectrum)


def default_time_step(dims: Sequence[int], dx: float, sound_speed: float, n_t: int,
                      traversal: float = 1.5) -> float:
    """Time step such that c0 * n_t * dt spans ``traversal`` grid diagonals."""
    diagonal = dx * float(np.sqrt(sum(d * d for d in dims)))
    return traversal * diagonal / (sound_speed * n_t)


def make_geometry(dims: Sequence[int],
                  dx: float = DEFAULT_DX,
                  sound_speed: float = DEFAULT_SOUND_SPEED,
                  n_t: int = 128,
                  dt: Optional[float] = None,
                  sensor_pitch: int = 2,
                  padding: int = 0,
                  mask: Optional[SamplingMask] = None) -> AcousticGeometry:
    """
    Build a limited-view geometry with sensors on the first face of axis 0.

    Sensors sit on every ``sensor_pitch``-th grid point of that face. Without a
    mask all sensors are active.
    """
    dims = tuple(int(d) for d in dims)
    if sensor_pitch < 1:
        raise PatDataError(f"sensor pitch must be at least 1, got {sensor_pitch}")
    face_axes = [list(range(0, d, sensor_pitch)) for d in dims[1:]]
    sensors = tuple((0,) + tuple(face_axes[a][i] for a, i in enumerate(index))
                    for index in np.ndindex(*[len(r) for r in face_axes]))
    if dt is None:
        dt = default_time_step(dims, dx, sound_speed, n_t)
    if mask is None:
        mask = tuple(range(len(sensors)))
    return AcousticGeometry(dims=dims, dx=float(dx), sound_speed=float(sound_speed),
                            n_t=int(n_t), dt=float(dt), sensors=sensors,
                            mask=tuple(mask), padding=int(padding))


class AcousticOperator:
    """
    Forward operator A, adjoint A* and data-fit gradient for one geometry.

    Every application of ``forward`` or ``adjoint`` increments ``calls``; the
    benchmark harness uses this to account for operator cost.
    """

    def __init__(self, geometry: AcousticGeometry):
        self.geometry = geometry
        padded = geometry.padded_dims
        k = wavenumber_magnitudes(padded, geometry.spacing)
        times = np.arange(geometry.n_t) * geometry.dt
        shape = (geometry.n_t,) + (1,) * len(padded)
        self._multipliers = np.cos(geometry.sound_speed * times.reshape(shape) * k[None, ...])
        self._spatial_axes = tuple(range(1, len(padded) + 1))
        offsets = [np.array([s[a] + geometry.padding for s in geometry.active_sensors], dtype=int)
                   for a in range(geometry.ndim)]
        self._sensor_index = (slice(None),) + tuple(offsets)
        self._crop = tuple(slice(geometry.padding, geometry.padding + d) for d in geometry.dims)
        self._lock = threading.Lock()
        self.calls = 0

    def reset_calls(self) -> None:
        with self._lock:
            self.calls = 0

    def _count(self) -> None:
        with self._lock:
            self.calls += 1

    def _as_array(self, x: FieldLike) -> np.ndarray:
        data = x.data if isinstance(x, ScalarField) else np.asarray(x, dtype=np.float64)
        if tuple(data.shape) != self.geometry.dims:
            raise PatShapeError(
                f"field dims {tuple(data.shape)} do not match geometry dims {self.geometry.dims}")
        return data

    def _check_sensor_data(self, y: SensorData) -> None:
        expected = (self.geometry.n_active, self.geometry.n_t)
        if tuple(y.data.shape) != expected:
            raise PatShapeError(f"sensor data shape {y.data.shape} does not match geometry {expected}")

    def forward(self, x: FieldLike) -> SensorData:
        """Sample the propagated field at the active sensors for t_i = i dt."""
        if self.geometry.n_active == 0:
            raise PatDataError("sampling mask selects no sensors")
        data = self._as_array(x)
        self._count()
        padded = np.pad(data, self.geometry.padding)
        spectrum = np.fft.fftn(padded)
        fields = np.fft.ifftn(spectrum[None, ...] * self._multipliers, axes=self._spatial_axes).real
        return SensorData(fields[self._sensor_index].T.copy(), self.geometry.dt)

    def adjoint(self, y: SensorData) -> ScalarField:
        """Exact transpose of ``forward``: scatter, filter each time slice, sum, crop."""
        if self.geometry.n_active == 0:
            raise PatDataError("sampling mask selects no sensors")
        self._check_sensor_data(y)
        self._count()
        scattered = np.zeros((self.geometry.n_t,) + self.geometry.padded_dims)
        scattered[self._sensor_index] = y.data.T
        spectra = np.fft.fftn(scattered, axes=self._spatial_axes)
        summed = np.sum(spectra * self._multipliers, axis=0)
        image = np.fft.ifftn(summed).real[self._crop]
        return ScalarField(np.ascontiguousarray(image), self.geometry.spacing)

    def gradient(self, x: FieldLike, y: SensorData) -> ScalarField:
        """A*(Ax - y), the gradient of 0.5 ||Ax - y||^2."""
        self._check_sensor_data(y)
        residual = self.forward(x).data - y.data
        return self.adjoint(SensorData(residual, y.dt))

    def normal(self, x: np.ndarray) -> np.ndarray:
        """A*A applied to a raw array."""
        return self.adjoint(self.forward(x)).data

    def objective(self, x: FieldLike, y: SensorData) -> float:
        residual = self.forward(x).data - y.data
        return 0.5 * float(np.sum(residual ** 2))


@lru_cache(maxsize=8)
def operator_for(geometry: AcousticGeometry) -> AcousticOperator:
    """Shared operator instance per geometry (multipliers are precomputed once)."""
    logger.debug("building acoustic operator for %s", geometry.dims)
    return AcousticOperator(geometry)


def forward(x: ScalarField, g: AcousticGeometry) -> SensorData:
    return operator_for(g).forward(x)


def adjoint(y: SensorData, g: AcousticGeometry) -> ScalarField:
    return operator_for(g).adjoint(y)


def data_fit_gradient(x: ScalarField, y: SensorData, g: AcousticGeometry) -> ScalarField:
    return operator_for(g).gradient(x, y)


def make_subsampling_mask(g: AcousticGeometry, factor: int, rng: SeededRng) -> SamplingMask:
    """
    Choose floor(full / factor) sensor locations uniformly at random.

    Args:
        g: Geometry whose full sensor set is sub-sampled
        factor: Sub-sampling factor (1 keeps every sensor)
        rng: Random stream deciding the selection

    Returns:
        Sorted indices into ``g.sensors``
    """
    n_full = len(g.sensors)
    if factor < 1:
        raise PatDataError(f"sub-sampling factor must be a positive integer, got {factor}")
    if factor > n_full:
        raise PatDataError(f"sub-sampling factor {factor} exceeds the sensor count {n_full}")
    if factor == 1:
        return tuple(range(n_full))
    count = n_full // factor
    chosen = rng.choice(n_full, count, replace=False)
    return tuple(sorted(int(i) for i in chosen))


def power_iteration(normal_op: Callable[[np.ndarray], np.ndarray],
                    shape: Sequence[int],
                    iters: int,
                    rng: SeededRng) -> List[float]:
    """Rayleigh quotients of the power iterates of a symmetric PSD operator."""
    if iters < 1:
        raise PatDataError(f"power iteration needs at least one step, got {iters}")
    v = rng.normal(tuple(shape))
    v /= np.linalg.norm(v)
    history = []
    for _ in range(iters):
        w = normal_op(v)
        history.append(float(np.vdot(v, w)))
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        v = w / norm
    return history


def estimate_lipschitz(g: AcousticGeometry, iters: int, rng: SeededRng,
                       normal_op: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> float:
    """
    Largest eigenvalue of A*A by power iteration.

    ``normal_op`` replaces A*A (used to check the estimator on known operators).
    The estimate does not count towards the shared operator's call counter.
    """
    if normal_op is None:
        normal_op = AcousticOperator(g).normal
    history = power_iteration(normal_op, g.dims, iters, rng)
    logger.info("Lipschitz estimate after %d iterations: %.6g", len(history), history[-1])
    return history[-1]
