"""
Comparative experiments: evaluation, convergence, timing and robustness.

Every experiment returns CSV rows; writing them (with the config hash line)
is left to the caller.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .acoustics import AcousticOperator, make_subsampling_mask
from .config import ExperimentConfig
from .dgd import DgdModel, reconstruct_dgd
from .exceptions import PatDataError
from .grids import SeededRng
from .metrics import evaluate, unbiased_rel_error
from .models import AcousticGeometry, DatasetSample, EvalReport, PhantomSpec, ScalarField, SensorData
from .phantoms import add_noise_snr, build_dataset
from .unet import UnetWeights, reconstruct_unet
from .variational import nnls_reconstruct, tv_reconstruct

logger = logging.getLogger(__name__)

METHODS = ('adjoint', 'nnls', 'tv', 'unet', 'dgd')

CONVERGENCE_FIELDS = ['method', 'iteration', 'mean_err']
TIMING_FIELDS = ['method', 'iterations', 'operator_applications', 'mean_seconds']
ROBUSTNESS_FIELDS = ['perturbation', 'method', 'baseline_err', 'perturbed_err', 'deterioration']
PERTURBATIONS = ('none', 'mask_reseed', 'sound_speed_up', 'sound_speed_down',
                 'noise_up', 'noise_down', 'tumor')


@dataclass
class MethodSuite:
    """Everything needed to reconstruct with any of the compared methods."""
    geometry: AcousticGeometry
    operator: AcousticOperator
    lipschitz: float
    tv_lambda: float
    tv_inner_iters: int = 20
    iterations: int = 20
    dgd_model: Optional[DgdModel] = None
    unet_weights: Optional[UnetWeights] = None

    def with_geometry(self, geometry: AcousticGeometry) -> 'MethodSuite':
        return replace(self, geometry=geometry, operator=AcousticOperator(geometry))

    def require(self, method: str) -> None:
        if method not in METHODS:
            raise PatDataError(f"unknown method '{method}', expected one of {METHODS}")
        if method == 'dgd' and self.dgd_model is None:
            raise PatDataError("no trained DGD model available; run train-dgd first")
        if method == 'unet' and self.unet_weights is None:
            raise PatDataError("no trained U-Net available; run train-unet first")

    def reconstruct(self, method: str, y: SensorData, iterations: Optional[int] = None,
                    x_true: Optional[ScalarField] = None,
                    callback: Optional[Callable[[int, ScalarField], None]] = None
                    ) -> Tuple[ScalarField, List[ScalarField], int]:
        """
        Reconstruct ``y`` with ``method``.

        Returns:
            Final image, snapshots (x0 first) and the iteration count
        """
        self.require(method)
        if method == 'dgd':
            x, snapshots = reconstruct_dgd(y, self.geometry, self.dgd_model, self.operator)
            return x, snapshots, self.dgd_model.k_max
        if method == 'unet':
            x, x0 = reconstruct_unet(y, self.geometry, self.unet_weights, self.operator)
            return x, [x0, x], 1
        x0 = self.operator.adjoint(y)
        if method == 'adjoint':
            return x0, [x0], 0
        iterations = self.iterations if iterations is None else iterations
        snapshots = [x0]

        def keep(k: int, x: ScalarField) -> None:
            snapshots.append(x)
            if callback is not None:
                callback(k, x)

        if method == 'nnls':
            x, _ = nnls_reconstruct(y, self.operator, self.lipschitz, iterations, x_init=x0,
                                    callback=keep, record_objective=False)
        else:
            x, _ = tv_reconstruct(y, self.operator, self.lipschitz, self.tv_lambda, iterations,
                                  self.tv_inner_iters, x_init=x0, callback=keep, record_objective=False)
        return x, snapshots, iterations


def _map(function, items: Sequence, threads: int) -> List:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(function, items))
    return [function(item) for item in items]


def evaluate_methods(samples: Sequence[DatasetSample], suite: MethodSuite,
                     methods: Sequence[str] = METHODS, threads: int = 1) -> List[EvalReport]:
    """One ``EvalReport`` per method over ``samples``."""
    reports = []
    for method in methods:
        suite.require(method)

        def run(sample: DatasetSample):
            start = time.perf_counter()
            x, _, iters = suite.reconstruct(method, sample.y)
            return evaluate(method, sample.index, x, sample.x_true, iters, time.perf_counter() - start)

        report = EvalReport(method=method, records=_map(run, samples, threads))
        logger.info("%s: mean err %.4f over %d samples", method, report.mean_err, len(samples))
        reports.append(report)
    return reports


def convergence_experiment(samples: Sequence[DatasetSample], suite: MethodSuite,
                           iteration_points: Sequence[int] = (1, 2, 5, 10, 20, 50),
                           methods: Sequence[str] = ('dgd', 'unet', 'tv', 'nnls'),
                           threads: int = 1) -> List[Dict]:
    """
    Mean err versus iteration: DGD at 1..k_max, U-Net at its single step and
    TV/NNLS at ``iteration_points`` (one run per sample up to the largest point).
    """
    if not samples:
        raise PatDataError("convergence experiment needs at least one sample")
    points = sorted(set(int(p) for p in iteration_points))
    rows = []
    for method in methods:
        suite.require(method)

        def run(sample: DatasetSample) -> Dict[int, float]:
            if method in ('dgd', 'unet'):
                _, snapshots, _ = suite.reconstruct(method, sample.y)
                return {k: unbiased_rel_error(x, sample.x_true)[0]
                        for k, x in enumerate(snapshots) if k > 0}
            errs: Dict[int, float] = {}

            def record(k: int, x: ScalarField) -> None:
                if k in points:
                    errs[k] = unbiased_rel_error(x, sample.x_true)[0]

            suite.reconstruct(method, sample.y, iterations=points[-1], callback=record)
            return errs

        per_sample = _map(run, samples, threads)
        for k in sorted(per_sample[0]):
            rows.append({'method': method, 'iteration': k,
                         'mean_err': f"{np.mean([errs[k] for errs in per_sample]):.10g}"})
    return rows


def timing_experiment(samples: Sequence[DatasetSample], suite: MethodSuite, runs: int = 5,
                      iterations: int = 5,
                      methods: Sequence[str] = ('unet', 'dgd', 'tv', 'nnls')) -> List[Dict]:
    """
    Mean wall time per reconstruction including x0 = A*y, measured sequentially.

    Operator applications are counted on a private operator instance.
    """
    if not samples:
        raise PatDataError("timing experiment needs at least one sample")
    timed = suite.with_geometry(suite.geometry)
    rows = []
    for method in methods:
        timed.require(method)
        seconds = []
        counts = set()
        for run in range(runs):
            sample = samples[run % len(samples)]
            timed.operator.reset_calls()
            start = time.perf_counter()
            _, _, iters = timed.reconstruct(method, sample.y, iterations=iterations)
            seconds.append(time.perf_counter() - start)
            counts.add(timed.operator.calls)
        if len(counts) != 1:
            raise PatDataError(f"{method}: operator application count varied between runs: {sorted(counts)}")
        rows.append({'method': method, 'iterations': iters, 'operator_applications': counts.pop(),
                     'mean_seconds': f"{np.mean(seconds):.6f}"})
    return rows


def _remeasure(samples: Sequence[DatasetSample], geometry: AcousticGeometry, snr: float,
               seed: int) -> List[DatasetSample]:
    """Simulate new noisy data for the same phantoms under ``geometry``."""
    operator = AcousticOperator(geometry)
    rng = SeededRng(seed)
    out = []
    for sample in samples:
        source = sample.x_back if sample.x_back is not None else sample.x_true
        y = add_noise_snr(operator.forward(source), snr, rng.spawn(sample.index))
        out.append(DatasetSample(sample.x_true, y, operator.adjoint(y), sample.index, sample.x_back))
    return out


def perturbed_samples(perturbation: str, samples: Sequence[DatasetSample], suite: MethodSuite,
                      cfg: ExperimentConfig) -> Tuple[List[DatasetSample], MethodSuite]:
    """
    Test samples and method suite under one perturbation.

    ``mask_reseed`` changes the sensor selection known to every method;
    ``sound_speed_*`` simulates data with a shifted sound speed that the
    reconstruction does not know; ``noise_*`` scales the noise level;
    ``tumor`` swaps in out-of-distribution phantoms.
    """
    geometry = suite.geometry
    snr = cfg.data.snr
    seed = cfg.bench.robustness_seed
    if perturbation == 'none':
        return list(samples), suite
    if perturbation == 'mask_reseed':
        mask = make_subsampling_mask(geometry.full_sampling(), cfg.geometry.subsample_factor,
                                     SeededRng(seed))
        shifted = geometry.with_mask(mask)
        return _remeasure(samples, shifted, snr, seed), suite.with_geometry(shifted)
    if perturbation in ('sound_speed_up', 'sound_speed_down'):
        sign = 1.0 if perturbation.endswith('up') else -1.0
        shifted = geometry.with_sound_speed(geometry.sound_speed * (1.0 + sign * cfg.bench.sound_speed_shift))
        return _remeasure(samples, shifted, snr, seed), suite
    if perturbation in ('noise_up', 'noise_down'):
        sign = 1.0 if perturbation.endswith('up') else -1.0
        return _remeasure(samples, geometry, snr / (1.0 + sign * cfg.bench.noise_scale), seed), suite
    if perturbation == 'tumor':
        spec = PhantomSpec.tumor(seed)
        tumors = build_dataset(len(samples), spec, geometry, snr, SeededRng(seed),
                               operator=AcousticOperator(geometry))
        return tumors, suite
    raise PatDataError(f"unknown perturbation '{perturbation}', expected one of {PERTURBATIONS}")


def robustness_experiment(perturbation: str, samples: Sequence[DatasetSample], suite: MethodSuite,
                          cfg: ExperimentConfig, methods: Sequence[str] = ('adjoint', 'unet', 'dgd'),
                          threads: int = 1) -> List[Dict]:
    """
    Mean err of each method before and after ``perturbation``.

    deterioration = (perturbed_err - baseline_err) / baseline_err.
    """
    changed, changed_suite = perturbed_samples(perturbation, samples, suite, cfg)
    rows = []
    for method in methods:
        baseline = evaluate_methods(samples, suite, [method], threads)[0].mean_err
        perturbed = evaluate_methods(changed, changed_suite, [method], threads)[0].mean_err
        rows.append({
            'perturbation': perturbation,
            'method': method,
            'baseline_err': f"{baseline:.10g}",
            'perturbed_err': f"{perturbed:.10g}",
            'deterioration': f"{(perturbed - baseline) / baseline:.10g}",
        })
        logger.info("%s / %s: err %.4f -> %.4f", perturbation, method, baseline, perturbed)
    return rows
