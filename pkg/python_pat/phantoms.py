"""
Synthetic ground truth, background augmentation, noise and dataset assembly.

Phantoms are non-negative with unit maximum. Every generator is a pure
function of its spec, grid and random stream.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .acoustics import AcousticOperator, operator_for
from .exceptions import PatDataError, PatShapeError
from .grids import SeededRng
from .models import AcousticGeometry, DatasetSample, PhantomSpec, ScalarField, SensorData

logger = logging.getLogger(__name__)

MIN_PHANTOM_EXTENT = 16


def _check_dims(dims: Sequence[int]) -> Tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if any(d < MIN_PHANTOM_EXTENT for d in dims):
        raise PatShapeError(f"phantom grids need at least {MIN_PHANTOM_EXTENT} voxels per axis, got {dims}")
    return dims


def _bezier(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Densely sampled quadratic Bezier curve (step below half a voxel)."""
    length = np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1)
    t = np.linspace(0.0, 1.0, int(np.ceil(2.5 * length)) + 2)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def _inside(points: np.ndarray, dims: Tuple[int, ...]) -> np.ndarray:
    rounded = np.rint(points)
    return np.all((rounded >= 0) & (rounded <= np.array(dims) - 1), axis=1)


def _rasterize(points: np.ndarray, dims: Tuple[int, ...], radius: float) -> np.ndarray:
    """Boolean tube of the given radius around a polyline of in-grid points."""
    centerline = np.zeros(dims, dtype=bool)
    idx = np.rint(points).astype(int)
    centerline[tuple(idx.T)] = True
    distance = ndimage.distance_transform_edt(~centerline)
    return distance <= radius


def _random_perpendicular(direction: np.ndarray, rng: SeededRng) -> np.ndarray:
    if direction.size == 1:
        return np.zeros_like(direction)
    v = rng.normal(direction.shape)
    v -= np.dot(v, direction) * direction
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def _normalize(volume: np.ndarray) -> np.ndarray:
    peak = volume.max()
    if peak <= 0:
        return volume
    return volume / peak


def tube_phantom(spec: PhantomSpec, dims: Sequence[int], rng: Optional[SeededRng] = None,
                 dx: float = 1.0) -> ScalarField:
    """
    Smooth curved tubes of constant, distinct intensities.

    Args:
        spec: Phantom parameters (count and radius ranges)
        dims: Grid extents, at least ``MIN_PHANTOM_EXTENT`` per axis
        rng: Random stream (defaults to one seeded from ``spec.seed``)
        dx: Grid spacing stored on the returned field

    Returns:
        Field with values in [0, 1] and maximum exactly 1
    """
    dims = _check_dims(dims)
    rng = rng or SeededRng(spec.seed)
    upper = np.array(dims, dtype=float) - 1
    volume = np.zeros(dims)
    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    intensities = rng.uniform(spec.intensity_range[0], spec.intensity_range[1], count)
    min_span = 0.3 * min(dims)
    for intensity in intensities:
        for _ in range(20):
            p0 = rng.uniform(0.1, 0.9, len(dims)) * upper
            p2 = rng.uniform(0.1, 0.9, len(dims)) * upper
            if np.linalg.norm(p2 - p0) >= min_span:
                break
        p1 = rng.uniform(0.05, 0.95, len(dims)) * upper
        points = _bezier(p0, p1, p2)
        points = points[_inside(points, dims)]
        radius = rng.uniform(spec.radius_range[0], spec.radius_range[1])
        tube = _rasterize(points, dims, radius)
        volume = np.maximum(volume, tube * intensity)
    return ScalarField(_normalize(volume), dx)


def _grow_branch(volume: np.ndarray, start: np.ndarray, direction: np.ndarray, length: float,
                 radius: float, level: int, spec: PhantomSpec, intensity: float,
                 rng: SeededRng) -> int:
    """Draw one vessel segment and recurse into two children; returns the bifurcation count."""
    dims = volume.shape
    end = start + direction * length
    bend = _random_perpendicular(direction, rng) * rng.uniform(-0.2, 0.2) * length
    control = 0.5 * (start + end) + bend
    points = _bezier(start, control, end)
    inside = _inside(points, dims)
    truncated = not inside.all()
    if truncated:
        stop = int(np.argmin(inside))
        points = points[:stop]
    if len(points) < 2:
        return 0
    segment = _rasterize(points, dims, radius)
    volume[segment] = np.maximum(volume[segment], intensity)
    if truncated or level >= spec.branch_levels:
        return 0
    tangent = end - control
    tangent /= np.linalg.norm(tangent)
    normal = _random_perpendicular(tangent, rng)
    bifurcations = 1
    for sign in (1.0, -1.0):
        angle = np.deg2rad(rng.uniform(20.0, 45.0))
        child = np.cos(angle) * tangent + sign * np.sin(angle) * normal
        child /= np.linalg.norm(child)
        child_radius = max(radius * 0.75, spec.radius_range[0])
        child_length = length * rng.uniform(0.7, 0.9)
        bifurcations += _grow_branch(volume, points[-1], child, child_length, child_radius,
                                     level + 1, spec, intensity, rng)
    return bifurcations


def vessel_phantom(spec: PhantomSpec, dims: Sequence[int], rng: Optional[SeededRng] = None,
                   dx: float = 1.0) -> ScalarField:
    """
    Procedural branching vessel trees with tapering radii and smooth centerlines.

    Each tree starts near the grid boundary, points roughly towards the centre
    and bifurcates ``spec.branch_levels`` times along every branch that stays
    inside the grid. Branches are clipped where they leave the grid, so every
    tree is a single connected structure.
    """
    dims = _check_dims(dims)
    rng = rng or SeededRng(spec.seed)
    upper = np.array(dims, dtype=float) - 1
    centre = upper / 2
    volume = np.zeros(dims)
    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    for _ in range(count):
        start = rng.uniform(0.15, 0.85, len(dims)) * upper
        axis = int(rng.integers(0, len(dims)))
        start[axis] = upper[axis] * (0.1 if rng.uniform() < 0.5 else 0.9)
        direction = centre - start + rng.normal(len(dims)) * 0.15 * min(dims)
        direction /= np.linalg.norm(direction)
        length = rng.uniform(0.25, 0.4) * min(dims)
        radius = rng.uniform(spec.radius_range[0], spec.radius_range[1])
        intensity = rng.uniform(spec.intensity_range[0], spec.intensity_range[1])
        _grow_branch(volume, start, direction, length, radius, 0, spec, intensity, rng)
    return ScalarField(_normalize(volume), dx)


def tumor_phantom(spec: PhantomSpec, dims: Sequence[int], rng: Optional[SeededRng] = None,
                  dx: float = 1.0) -> ScalarField:
    """Filled ellipse (intensity 0.6) inside a ring of vessels (intensity 1.0) with short spokes."""
    dims = _check_dims(dims)
    rng = rng or SeededRng(spec.seed)
    upper = np.array(dims, dtype=float) - 1
    centre = upper / 2 + rng.uniform(-0.05, 0.05, len(dims)) * upper
    axes = rng.uniform(0.12, 0.2, len(dims)) * np.array(dims)
    grid = np.meshgrid(*[np.arange(d, dtype=float) for d in dims], indexing='ij')
    inside = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, centre, axes)) <= 1.0
    volume = np.where(inside, 0.6, 0.0)

    # ring in the plane of the last two axes
    ring_radius = float(axes.max()) + 3.0
    phi = np.linspace(0.0, 2 * np.pi, int(np.ceil(2.5 * 2 * np.pi * ring_radius)) + 1)
    ring = np.tile(centre, (phi.size, 1))
    ring[:, -1] += ring_radius * np.cos(phi)
    if len(dims) > 1:
        ring[:, -2] += ring_radius * np.sin(phi)
    ring = ring[_inside(ring, dims)]
    vessel_radius = rng.uniform(spec.radius_range[0], spec.radius_range[1])
    if len(ring) >= 2:
        volume[_rasterize(ring, dims, vessel_radius)] = 1.0
    for _ in range(int(rng.integers(2, 5))):
        angle = rng.uniform(0.0, 2 * np.pi)
        direction = np.zeros(len(dims))
        direction[-1] = np.cos(angle)
        if len(dims) > 1:
            direction[-2] = np.sin(angle)
        start = centre + ring_radius * direction
        spoke = _bezier(start, start + 0.1 * min(dims) * direction, start + 0.2 * min(dims) * direction)
        spoke = spoke[_inside(spoke, dims)]
        if len(spoke) >= 2:
            volume[_rasterize(spoke, dims, vessel_radius)] = 1.0
    return ScalarField(_normalize(volume), dx)


def generate_phantom(spec: PhantomSpec, dims: Sequence[int], rng: Optional[SeededRng] = None,
                     dx: float = 1.0) -> ScalarField:
    """Dispatch on ``spec.kind``."""
    generators = {'tubes': tube_phantom, 'vessels': vessel_phantom, 'tumor': tumor_phantom}
    return generators[spec.kind](spec, dims, rng, dx)


def gaussian_random_field(dims: Sequence[int], rng: SeededRng, sigma: float = 2.0,
                          max_value: float = 0.1) -> np.ndarray:
    """Smoothed white noise, negative parts clipped, scaled to ``max_value``."""
    white = rng.normal(tuple(dims))
    smooth = ndimage.gaussian_filter(white, sigma, mode='wrap')
    clipped = np.clip(smooth, 0.0, None)
    peak = clipped.max()
    if peak <= 0:
        return clipped
    return clipped * (max_value / peak)


def background_field(x_true: ScalarField, rng: SeededRng, sigma: float = 2.0,
                     max_value: float = 0.1, threshold: float = 0.1) -> ScalarField:
    """
    Add a low-absorbing background wherever ``x_true`` does not exceed ``threshold``.

    Args:
        x_true: Clean phantom with values in [0, 1]
        rng: Random stream for the background realisation
        sigma: Correlation length of the Gaussian random field (voxels)
        max_value: Maximum of the background component
        threshold: Voxels above this intensity are left untouched

    Returns:
        x_back = x_true + masked background
    """
    data = x_true.data
    if data.min() < 0 or data.max() > 1:
        raise PatDataError("background augmentation expects a phantom with values in [0, 1]")
    background = gaussian_random_field(x_true.dims, rng, sigma, max_value)
    return x_true.with_data(data + np.where(data <= threshold, background, 0.0))


def add_noise_snr(y: SensorData, snr: float, rng: SeededRng) -> SensorData:
    """Add Gaussian noise scaled so that RMS(y) / RMS(noise) equals ``snr`` exactly."""
    if snr <= 0:
        raise PatDataError(f"SNR must be positive, got {snr}")
    signal = y.norm()
    if signal == 0:
        raise PatDataError("cannot set an SNR for an all-zero measurement")
    noise = rng.normal(y.data.shape)
    noise *= signal / (snr * np.linalg.norm(noise))
    return y.with_data(y.data + noise)


def rescale_to_reference_std(y: SensorData, ref_std: float) -> SensorData:
    """
    Scale measurement data to the standard deviation ``ref_std``.

    The result does not depend on the scale of ``y``: inputs y and c * y (c > 0)
    give outputs that agree up to floating-point rounding, not bitwise.
    """
    std = y.std()
    if std <= np.finfo(float).eps * max(np.abs(y.data).max(), np.finfo(float).tiny):
        raise PatDataError("cannot rescale constant measurement data")
    if std == ref_std:
        return y.with_data(y.data.copy())
    return y.with_data(y.data * (ref_std / std))


def build_dataset(n: int, spec: PhantomSpec, geometry: AcousticGeometry, snr: float,
                  rng: SeededRng, background: bool = False, background_sigma: float = 2.0,
                  operator: Optional[AcousticOperator] = None,
                  threads: int = 1) -> List[DatasetSample]:
    """
    Generate ``n`` samples y = A x + noise with their initialisations x0 = A* y.

    Sample ``i`` draws everything from the substream ``rng.spawn(i)``. In
    background mode the measurement comes from the backgrounded phantom while
    the clean phantom stays the training target.
    """
    if n < 1:
        raise PatDataError(f"dataset size must be at least 1, got {n}")
    operator = operator or operator_for(geometry)

    def make(i: int) -> DatasetSample:
        stream = rng.spawn(i)
        x_true = generate_phantom(spec, geometry.dims, stream, geometry.dx)
        x_back = background_field(x_true, stream, background_sigma) if background else None
        clean = operator.forward(x_back if background else x_true)
        y = add_noise_snr(clean, snr, stream)
        return DatasetSample(x_true=x_true, y=y, x0=operator.adjoint(y), index=i, x_back=x_back)

    logger.info("building %d %s samples (background=%s)", n, spec.kind, background)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(make, range(n)))
    return [make(i) for i in range(n)]
