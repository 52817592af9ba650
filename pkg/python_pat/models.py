"""
Data models for the python_pat reconstruction library.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import PatDataError, PatShapeError


SamplingMask = Tuple[int, ...]


@dataclass
class ScalarField:
    """An n-dimensional real grid (initial pressure, iterates, gradient images)."""
    data: np.ndarray
    spacing: Tuple[float, ...]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 0 or self.data.size == 0:
            raise PatShapeError("ScalarField needs at least one non-empty axis")
        if np.isscalar(self.spacing):
            self.spacing = (float(self.spacing),) * self.data.ndim
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.data.ndim:
            raise PatShapeError(
                f"spacing has {len(self.spacing)} entries for a {self.data.ndim}-D grid")
        if any(s <= 0 for s in self.spacing):
            raise PatDataError(f"grid spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise PatDataError("ScalarField contains non-finite values")

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data.ravel()))

    def with_data(self, data: np.ndarray) -> 'ScalarField':
        """Return a new field on the same grid holding ``data``."""
        return ScalarField(data, self.spacing)

    def copy(self) -> 'ScalarField':
        return ScalarField(self.data.copy(), self.spacing)

    @classmethod
    def zeros(cls, dims: Sequence[int], spacing) -> 'ScalarField':
        return cls(np.zeros(tuple(dims)), spacing)


@dataclass
class Spectrum:
    """Unnormalised DFT coefficients of a ScalarField with their wavenumber magnitudes."""
    coefficients: np.ndarray
    wavenumbers: np.ndarray  # |k| in rad/m, same shape as coefficients
    spacing: Tuple[float, ...]

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.coefficients.shape)


@dataclass
class SensorData:
    """Sampled boundary pressure: one time series of ``n_t`` samples per active sensor."""
    data: np.ndarray  # shape (n_sensors, n_t)
    dt: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise PatShapeError(f"SensorData must be 2-D (sensors x time), got {self.data.shape}")
        if self.dt <= 0:
            raise PatDataError(f"time step must be positive, got {self.dt}")
        if not np.all(np.isfinite(self.data)):
            raise PatDataError("SensorData contains non-finite values")

    @property
    def n_sensors(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_t(self) -> int:
        return int(self.data.shape[1])

    def norm(self) -> float:
        return float(np.linalg.norm(self.data.ravel()))

    def std(self) -> float:
        return float(np.std(self.data))

    def with_data(self, data: np.ndarray) -> 'SensorData':
        return SensorData(data, self.dt)


@dataclass(frozen=True)
class AcousticGeometry:
    """
    Measurement setup for the limited-view acoustic operator.

    Sensors are grid indices on the first face of axis 0 (the "top" edge in 2-D).
    ``mask`` selects the active subset by position in ``sensors``.
    """
    dims: Tuple[int, ...]
    dx: float
    sound_speed: float
    n_t: int
    dt: float
    sensors: Tuple[Tuple[int, ...], ...]
    mask: SamplingMask
    padding: int = 0

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise PatShapeError(f"grid dims must be positive, got {self.dims}")
        if self.dx <= 0 or self.sound_speed <= 0:
            raise PatDataError("dx and sound speed must be positive")
        if self.dt <= 0:
            raise PatDataError(f"dt must be positive, got {self.dt}")
        if self.n_t < 1:
            raise PatDataError(f"n_t must be at least 1, got {self.n_t}")
        if self.padding < 0:
            raise PatDataError(f"padding must be non-negative, got {self.padding}")
        if not self.sensors:
            raise PatDataError("geometry has no sensor locations")
        for index in self.sensors:
            if len(index) != len(self.dims):
                raise PatShapeError(f"sensor index {index} does not match grid rank {len(self.dims)}")
            if index[0] != 0:
                raise PatDataError(f"sensor {index} is not on the measurement face (axis 0, index 0)")
            if any(i < 0 or i >= d for i, d in zip(index, self.dims)):
                raise PatShapeError(f"sensor {index} lies outside the grid {self.dims}")
        if len(set(self.mask)) != len(self.mask) or any(
                m < 0 or m >= len(self.sensors) for m in self.mask):
            raise PatDataError("sampling mask must be a subset of the full sensor set")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def spacing(self) -> Tuple[float, ...]:
        return (self.dx,) * self.ndim

    @property
    def padded_dims(self) -> Tuple[int, ...]:
        return tuple(d + 2 * self.padding for d in self.dims)

    @property
    def active_sensors(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(self.sensors[m] for m in self.mask)

    @property
    def n_active(self) -> int:
        return len(self.mask)

    @property
    def duration(self) -> float:
        return self.n_t * self.dt

    def with_mask(self, mask: SamplingMask) -> 'AcousticGeometry':
        return replace(self, mask=tuple(sorted(mask)))

    def with_sound_speed(self, sound_speed: float) -> 'AcousticGeometry':
        return replace(self, sound_speed=float(sound_speed))

    def full_sampling(self) -> 'AcousticGeometry':
        return replace(self, mask=tuple(range(len(self.sensors))))

    def signature(self) -> str:
        """Stable text description used for cache keys and manifests."""
        return (f"dims={self.dims};dx={self.dx!r};c0={self.sound_speed!r};n_t={self.n_t};"
                f"dt={self.dt!r};padding={self.padding};sensors={list(self.sensors)};"
                f"mask={list(self.mask)}")

    def to_dict(self) -> Dict:
        return {
            'dims': list(self.dims),
            'dx': self.dx,
            'sound_speed': self.sound_speed,
            'n_t': self.n_t,
            'dt': self.dt,
            'padding': self.padding,
            'sensors': [list(s) for s in self.sensors],
            'mask': list(self.mask),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'AcousticGeometry':
        return cls(
            dims=tuple(data['dims']),
            dx=float(data['dx']),
            sound_speed=float(data['sound_speed']),
            n_t=int(data['n_t']),
            dt=float(data['dt']),
            sensors=tuple(tuple(s) for s in data['sensors']),
            mask=tuple(data['mask']),
            padding=int(data.get('padding', 0)),
        )


@dataclass
class PhantomSpec:
    """Parameters of a procedural phantom generator."""
    kind: str = "vessels"  # tubes | vessels | tumor
    count_range: Tuple[int, int] = (1, 3)
    radius_range: Tuple[float, float] = (1.0, 2.5)
    intensity_range: Tuple[float, float] = (0.5, 1.0)
    branch_levels: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ('tubes', 'vessels', 'tumor'):
            raise PatDataError(f"unknown phantom kind '{self.kind}'")
        for name in ('count_range', 'radius_range', 'intensity_range'):
            low, high = getattr(self, name)
            if low <= 0 or high < low:
                raise PatDataError(f"{name} must be positive and ordered, got {(low, high)}")
        if self.branch_levels < 0:
            raise PatDataError("branch_levels must be non-negative")

    @classmethod
    def tubes(cls, seed: int = 0) -> 'PhantomSpec':
        return cls(kind='tubes', count_range=(3, 8), radius_range=(0.8, 1.8), seed=seed)

    @classmethod
    def vessels(cls, seed: int = 0) -> 'PhantomSpec':
        return cls(kind='vessels', count_range=(1, 3), radius_range=(1.0, 2.5), seed=seed)

    @classmethod
    def tumor(cls, seed: int = 0) -> 'PhantomSpec':
        return cls(kind='tumor', count_range=(1, 1), radius_range=(1.0, 1.5), seed=seed)


@dataclass
class DatasetSample:
    """One training or test pair with its adjoint initialisation."""
    x_true: ScalarField
    y: SensorData
    x0: ScalarField
    index: int = 0
    x_back: Optional[ScalarField] = None


@dataclass
class SolverTrace:
    """Per-iteration record of a proximal gradient run."""
    objectives: List[float] = field(default_factory=list)
    errors: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    initial_objective: Optional[float] = None

    @property
    def iterations(self) -> int:
        return len(self.seconds)


@dataclass
class EvalRecord:
    """Quality measures of one reconstruction."""
    method: str
    sample: int
    err: float
    rel_l2: float
    psnr: float
    ssim: float
    iters: int
    seconds: float


@dataclass
class EvalReport:
    """Per-sample evaluation of one reconstruction method."""
    method: str
    records: List[EvalRecord] = field(default_factory=list)

    def _mean(self, name: str) -> float:
        if not self.records:
            return float('nan')
        return float(np.mean([getattr(r, name) for r in self.records]))

    @property
    def mean_err(self) -> float:
        return self._mean('err')

    @property
    def mean_rel_l2(self) -> float:
        return self._mean('rel_l2')

    @property
    def mean_psnr(self) -> float:
        return self._mean('psnr')

    @property
    def mean_ssim(self) -> float:
        return self._mean('ssim')

    @property
    def mean_seconds(self) -> float:
        return self._mean('seconds')
