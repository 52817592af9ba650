"""
Proximal gradient baselines: non-negative least squares and isotropic TV.
"""

import logging
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .acoustics import AcousticOperator
from .exceptions import PatDataError
from .metrics import unbiased_rel_error
from .models import ScalarField, SensorData, SolverTrace

logger = logging.getLogger(__name__)

DEFAULT_TV_INNER_ITERS = 20
DEFAULT_LAMBDA_GRID = tuple(float(v) for v in np.logspace(-5, -2, 7))


def discrete_gradient(x: np.ndarray) -> np.ndarray:
    """Forward differences with replicated edges; shape (ndim, *x.shape)."""
    grads = np.zeros((x.ndim,) + x.shape)
    for axis in range(x.ndim):
        lead = [slice(None)] * x.ndim
        lead[axis] = slice(0, -1)
        grads[axis][tuple(lead)] = np.diff(x, axis=axis)
    return grads


def discrete_gradient_adjoint(p: np.ndarray) -> np.ndarray:
    """Exact transpose of ``discrete_gradient`` (the negative divergence)."""
    out = np.zeros(p.shape[1:])
    for axis in range(p.shape[0]):
        component = np.moveaxis(p[axis], axis, 0).copy()
        component[-1] = 0.0
        term = -component
        term[1:] += component[:-1]
        out += np.moveaxis(term, 0, axis)
    return out


def total_variation(x: np.ndarray) -> float:
    """Isotropic TV, the sum of per-voxel gradient magnitudes."""
    return float(np.sum(np.sqrt(np.sum(discrete_gradient(x) ** 2, axis=0))))


def prox_nonneg(v: ScalarField) -> ScalarField:
    return v.with_data(np.maximum(v.data, 0.0))


class NonnegProx:
    """Indicator of the non-negative orthant; its prox is exact."""

    exact = True

    def __call__(self, v: np.ndarray, alpha: float) -> np.ndarray:
        return np.maximum(v, 0.0)

    def value(self, x: np.ndarray) -> float:
        return 0.0 if np.all(x >= 0) else float('inf')

    def reset(self) -> None:
        pass


class TvProx:
    """
    Approximate prox of alpha * TV via projected gradient on the dual.

    The dual variable persists between calls so successive outer iterations
    warm-start the inner solver; ``reset`` clears it.
    """

    exact = False

    def __init__(self, inner_iters: int = DEFAULT_TV_INNER_ITERS):
        if inner_iters < 1:
            raise PatDataError(f"TV prox needs at least one inner iteration, got {inner_iters}")
        self.inner_iters = int(inner_iters)
        self._dual: Optional[np.ndarray] = None

    def reset(self) -> None:
        self._dual = None

    def value(self, x: np.ndarray) -> float:
        return total_variation(x)

    def __call__(self, v: np.ndarray, alpha: float) -> np.ndarray:
        if alpha < 0:
            raise PatDataError(f"prox parameter must be non-negative, got {alpha}")
        if alpha == 0:
            return v.copy()
        shape = (v.ndim,) + v.shape
        if self._dual is None or self._dual.shape != shape:
            self._dual = np.zeros(shape)
        tau = 1.0 / (4.0 * v.ndim)
        p = self._dual
        for _ in range(self.inner_iters):
            x = v - alpha * discrete_gradient_adjoint(p)
            p = p + (tau / alpha) * discrete_gradient(x)
            p /= np.maximum(1.0, np.sqrt(np.sum(p ** 2, axis=0)))
        self._dual = p
        return v - alpha * discrete_gradient_adjoint(p)


def prox_tv(v: ScalarField, alpha: float, inner_iters: int = DEFAULT_TV_INNER_ITERS) -> ScalarField:
    """
    Approximate minimiser of TV(x) + ||x - v||^2 / (2 alpha).

    Args:
        v: Field to denoise
        alpha: Prox parameter (alpha >= 0; zero returns v)
        inner_iters: Dual projected-gradient steps from a zero dual start

    Raises:
        PatDataError: If alpha is negative
    """
    return v.with_data(TvProx(inner_iters)(v.data, alpha))


def proximal_gradient(y: SensorData,
                      operator: AcousticOperator,
                      prox,
                      lam: float,
                      gamma: float,
                      iterations: int,
                      x_init: ScalarField,
                      x_true: Optional[ScalarField] = None,
                      callback: Optional[Callable[[int, ScalarField], None]] = None,
                      record_objective: bool = True) -> Tuple[ScalarField, SolverTrace]:
    """
    Run x_{k+1} = prox_{lam gamma}(x_k - gamma A*(A x_k - y)) with a constant step.

    Inexact proxes are safeguarded: a candidate z is accepted only if the prox
    objective drops by at least ||z - x_k||^2 / 2, otherwise x_k is kept. This
    holds for every exact prox and keeps the objective monotone for gamma <= 2/L.

    Args:
        y: Measured sensor data
        operator: Acoustic operator of the measurement geometry
        prox: ``NonnegProx`` or ``TvProx`` instance
        lam: Regularisation weight
        gamma: Step size (> 0)
        iterations: Number of outer iterations K (>= 0)
        x_init: Starting point
        x_true: Ground truth; when given, err(x_k) is recorded
        callback: Called as ``callback(k, x_k)`` after every iteration
        record_objective: Evaluate J(x_k) each iteration (one extra forward each)

    Returns:
        Final iterate and the per-iteration trace
    """
    if gamma <= 0:
        raise PatDataError(f"step size must be positive, got {gamma}")
    if iterations < 0:
        raise PatDataError(f"iteration count must be non-negative, got {iterations}")
    prox.reset()
    x = x_init.data.copy()
    trace = SolverTrace()

    def objective(data: np.ndarray) -> float:
        penalty = prox.value(data)
        # indicator priors contribute 0 or inf regardless of lam
        return operator.objective(data, y) + (penalty if np.isinf(penalty) else lam * penalty)

    if record_objective:
        trace.initial_objective = objective(x)
    for k in range(1, iterations + 1):
        start = time.perf_counter()
        v = x - gamma * operator.gradient(x, y).data
        z = prox(v, lam * gamma)
        if not prox.exact:
            def phi(u: np.ndarray) -> float:
                return lam * gamma * prox.value(u) + 0.5 * float(np.sum((u - v) ** 2))
            if phi(z) > phi(x) - 0.5 * float(np.sum((z - x) ** 2)):
                logger.debug("iteration %d: inexact prox step rejected", k)
                z = x
        x = z
        trace.seconds.append(time.perf_counter() - start)
        if record_objective:
            trace.objectives.append(objective(x))
        current = x_init.with_data(x)
        if x_true is not None:
            trace.errors.append(unbiased_rel_error(current, x_true)[0])
        if callback is not None:
            callback(k, current)
    return x_init.with_data(x), trace


def nnls_reconstruct(y: SensorData, operator: AcousticOperator, lipschitz: float,
                     iterations: int, x_init: Optional[ScalarField] = None,
                     **kwargs) -> Tuple[ScalarField, SolverTrace]:
    """Projected gradient onto x >= 0 with gamma = 1/L, started from A*y by default."""
    x_init = x_init if x_init is not None else operator.adjoint(y)
    return proximal_gradient(y, operator, NonnegProx(), 0.0, 1.0 / lipschitz, iterations,
                             x_init, **kwargs)


def tv_reconstruct(y: SensorData, operator: AcousticOperator, lipschitz: float,
                   lam_rel: float, iterations: int, inner_iters: int = DEFAULT_TV_INNER_ITERS,
                   x_init: Optional[ScalarField] = None,
                   **kwargs) -> Tuple[ScalarField, SolverTrace]:
    """
    TV-regularised proximal gradient with gamma = 1/L.

    ``lam_rel`` is dimensionless: the applied weight is ``lam_rel * L`` so the
    per-step threshold lam * gamma equals ``lam_rel``.
    """
    x_init = x_init if x_init is not None else operator.adjoint(y)
    return proximal_gradient(y, operator, TvProx(inner_iters), lam_rel * lipschitz,
                             1.0 / lipschitz, iterations, x_init, **kwargs)


def select_tv_lambda(samples: Sequence, operator: AcousticOperator, lipschitz: float,
                     iterations: int, grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
                     inner_iters: int = DEFAULT_TV_INNER_ITERS) -> Tuple[float, Dict[float, float]]:
    """
    Pick the relative TV weight with the smallest mean err on validation samples.

    Args:
        samples: ``DatasetSample`` objects with ``y``, ``x0`` and ``x_true``
        operator: Acoustic operator of the measurement geometry
        lipschitz: Estimate of ||A*A||
        iterations: Outer iterations per trial
        grid: Candidate relative weights

    Returns:
        Best weight and the mean err for every candidate
    """
    if not samples:
        raise PatDataError("lambda selection needs at least one validation sample")
    scores = {}
    for lam_rel in grid:
        errs = []
        for sample in samples:
            x, _ = tv_reconstruct(sample.y, operator, lipschitz, lam_rel, iterations, inner_iters,
                                  x_init=sample.x0, record_objective=False)
            errs.append(unbiased_rel_error(x, sample.x_true)[0])
        scores[float(lam_rel)] = float(np.mean(errs))
    best = min(scores, key=scores.get)
    logger.info("selected TV weight %.3g (mean err %.4f)", best, scores[best])
    return best, scores


def trace_rows(trace: SolverTrace) -> List[Dict]:
    """SolverTrace as CSV rows: iteration, objective, err, seconds."""
    rows = []
    for i, seconds in enumerate(trace.seconds):
        rows.append({
            'iteration': i + 1,
            'objective': trace.objectives[i] if i < len(trace.objectives) else '',
            'err': trace.errors[i] if i < len(trace.errors) else '',
            'seconds': seconds,
        })
    return rows
