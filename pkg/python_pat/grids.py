"""
Deterministic random streams and the discrete Fourier transform contract.

The forward transform is unnormalised and the inverse carries the 1/N factor,
so ``fft_inverse(fft_forward(f))`` is the identity and Parseval reads
``||f||^2 = (1/N) sum |F|^2``.
"""

from typing import Sequence

import numpy as np

from .exceptions import PatDataError
from .models import ScalarField, Spectrum


class SeededRng:
    """
    Counter-based random stream (Philox) owned by a single task.

    Identical seeds give identical streams. ``spawn(i)`` derives the substream
    ``seed + i`` used for per-sample generation.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._generator = np.random.Generator(np.random.Philox(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def spawn(self, offset: int) -> 'SeededRng':
        return SeededRng(self.seed + int(offset))

    def gaussian(self, n: int) -> np.ndarray:
        return rng_gaussian(self, n)

    def normal(self, shape) -> np.ndarray:
        return self._generator.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"SeededRng(seed={self.seed})"


def rng_gaussian(rng: SeededRng, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. standard normal samples from ``rng``."""
    if n < 0:
        raise PatDataError(f"sample count must be non-negative, got {n}")
    return rng.generator.standard_normal(int(n))


def wavenumber_magnitudes(dims: Sequence[int], spacing: Sequence[float]) -> np.ndarray:
    """|k| on the FFT grid (rad/m), following numpy's frequency ordering."""
    axes = [2.0 * np.pi * np.fft.fftfreq(n, d=h) for n, h in zip(dims, spacing)]
    grids = np.meshgrid(*axes, indexing='ij')
    return np.sqrt(sum(k ** 2 for k in grids))


def fft_forward(f: ScalarField) -> Spectrum:
    """Unnormalised n-D DFT of a real field."""
    if not np.all(np.isfinite(f.data)):
        raise PatDataError("cannot transform a field with non-finite values")
    coefficients = np.fft.fftn(f.data)
    return Spectrum(coefficients, wavenumber_magnitudes(f.dims, f.spacing), f.spacing)


def fft_inverse(spectrum: Spectrum) -> ScalarField:
    """Inverse DFT (with the 1/N factor) of a Hermitian spectrum; returns the real part."""
    if not np.all(np.isfinite(spectrum.coefficients)):
        raise PatDataError("cannot invert a spectrum with non-finite coefficients")
    values = np.fft.ifftn(spectrum.coefficients)
    return ScalarField(values.real, spectrum.spacing)


