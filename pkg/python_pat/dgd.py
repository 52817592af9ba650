"""
Deep gradient descent: greedy stage-wise training, reconstruction and transfer updates.

Stage inputs (x_k, grad_k) are computed once per stage and cached, so the
network optimisation itself never touches the acoustic operator.
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .acoustics import AcousticOperator, operator_for
from .config import DgdConfig
from .exceptions import PatFormatError, PatShapeError, PatTrainingError
from .grids import SeededRng
from .layers import (AdamState, DgdBlock, StageWeights, adam_step, batch_loss_and_grad, batches,
                     init_weights)
from .models import AcousticGeometry, DatasetSample, ScalarField, SensorData
from .weights_io import DGD_MAGIC, StageTensors, to_storage_precision

logger = logging.getLogger(__name__)

EVAL_CHUNK = 4


class DgdModel:
    """Ordered stage weights theta_0 .. theta_{k_max-1} plus training metadata."""

    MAGIC = DGD_MAGIC

    def __init__(self, stages: Sequence[StageWeights], metadata: Optional[Dict[str, Any]] = None):
        if not stages:
            raise PatTrainingError("a DGD model needs at least one stage")
        self.stages = list(stages)
        self.metadata = dict(metadata or {})

    @property
    def k_max(self) -> int:
        return len(self.stages)

    @property
    def ndim(self) -> int:
        return self.stages[0].ndim

    def stage_tensors(self) -> List[StageTensors]:
        return [stage.tensors for stage in self.stages]

    @classmethod
    def from_stage_tensors(cls, stages: List[StageTensors]) -> 'DgdModel':
        try:
            return cls([StageWeights(tensors) for tensors in stages])
        except (PatShapeError, PatTrainingError) as e:
            raise PatFormatError(f"weights do not describe a DGD model: {e}")

    def copy(self) -> 'DgdModel':
        return DgdModel([s.copy() for s in self.stages], dict(self.metadata))

    def equals(self, other: 'DgdModel') -> bool:
        return self.k_max == other.k_max and all(a.equals(b) for a, b in zip(self.stages, other.stages))

    @classmethod
    def zeros(cls, k_max: int, ndim: int = 2) -> 'DgdModel':
        return cls([StageWeights.zeros(ndim) for _ in range(k_max)])


def apply_stage(weights: StageWeights, x: np.ndarray, g: np.ndarray,
                chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Evaluate one stage on a stack of samples in fixed-size chunks."""
    block = DgdBlock(weights)
    return np.concatenate([block.forward(x[i:i + chunk], g[i:i + chunk])
                           for i in range(0, len(x), chunk)])


def mean_l2_loss(x: np.ndarray, x_true: np.ndarray) -> float:
    """Mean over samples of ||x - x_true||^2."""
    return float(np.mean(np.sum((x - x_true).reshape(len(x), -1) ** 2, axis=1)))


def _optimise(weights: StageWeights, x_k: np.ndarray, g_k: np.ndarray, x_true: np.ndarray,
              steps: int, batch: int, lr: float, stage0: bool, cfg: DgdConfig,
              rng: SeededRng, label: str) -> Tuple[StageWeights, List[float]]:
    params = dict(weights.tensors)
    state = AdamState(lr=lr)
    curve: List[float] = []
    schedule: List[np.ndarray] = []
    for step in range(steps):
        if not schedule:
            schedule = batches(len(x_k), batch, rng)
        idx = schedule.pop(0)
        block = DgdBlock(StageWeights(params))
        out = block.forward(x_k[idx], g_k[idx])
        loss, upstream = batch_loss_and_grad(out, x_true[idx], stage0, cfg.loss_add_alpha,
                                             cfg.loss_add_beta)
        grads, _, _ = block.backward(upstream)
        params = adam_step(params, grads, state)
        curve.append(loss)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.info("%s step %d/%d: loss %.6g", label, step + 1, steps, loss)
    return StageWeights(to_storage_precision(params)), curve


def train_stage(k: int, x_k: np.ndarray, g_k: np.ndarray, x_true: np.ndarray,
                cfg: Optional[DgdConfig] = None,
                init: Optional[StageWeights] = None) -> Tuple[StageWeights, List[float]]:
    """
    Fit theta_k with Adam so that G(x_k, grad_k) approaches x_true.

    Args:
        k: Stage index (stage 0 adds the small-norm penalty to the loss)
        x_k: Iterates, shape (N, *grid)
        g_k: Data-fit gradients at the iterates, same shape
        x_true: Targets, same shape
        cfg: Training hyperparameters (steps, batch, learning rate, seed)
        init: Starting weights (default: He initialisation from the stage seed)

    Returns:
        Trained weights rounded to storage precision, and the per-step loss

    Raises:
        PatTrainingError: If the sample set is empty
    """
    cfg = cfg or DgdConfig()
    if len(x_k) == 0:
        raise PatTrainingError(f"stage {k}: no training samples")
    if not (x_k.shape == g_k.shape == x_true.shape):
        raise PatShapeError(f"stage {k}: iterate, gradient and target stacks differ in shape")
    rng = SeededRng(cfg.seed + 1000 * k)
    weights = init.copy() if init is not None else init_weights(rng, ndim=x_k.ndim - 1)
    trained, curve = _optimise(weights, x_k, g_k, x_true, cfg.steps_per_stage, cfg.batch, cfg.lr,
                               k == 0, cfg, rng, f"stage {k}")
    identity = StageWeights.zeros(trained.ndim, trained['x1.w'].shape[-1])
    trained_loss = mean_l2_loss(apply_stage(trained, x_k, g_k), x_true)
    identity_loss = mean_l2_loss(apply_stage(identity, x_k, g_k), x_true)
    if trained_loss > identity_loss:
        logger.warning("stage %d: trained loss %.6g exceeds zero-update loss %.6g; keeping the zero update",
                       k, trained_loss, identity_loss)
        trained = identity
    return trained, curve


class GradientCache:
    """
    On-disk cache of per-stage gradient stacks.

    Keys hash the iterate stack, the measurements and the geometry, so a cached
    entry is valid for any rerun that reaches the same iterates.
    """

    def __init__(self, directory: Optional[Union[str, Path]] = None):
        self.directory = Path(directory) if directory is not None else None
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(x: np.ndarray, ys: Sequence[SensorData], geometry: AcousticGeometry) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(x).tobytes())
        for y in ys:
            digest.update(np.ascontiguousarray(y.data).tobytes())
        digest.update(geometry.signature().encode('utf-8'))
        return digest.hexdigest()

    def path(self, stage: int, key: str) -> Optional[Path]:
        if self.directory is None:
            return None
        return self.directory / f"stage{stage}_{key[:24]}.npy"

    def load(self, stage: int, key: str) -> Optional[np.ndarray]:
        path = self.path(stage, key)
        if path is None or not path.exists():
            self.misses += 1
            return None
        self.hits += 1
        logger.info("stage %d: reusing cached gradients %s", stage, path.name)
        return np.load(path)

    def store(self, stage: int, key: str, gradients: np.ndarray) -> None:
        path = self.path(stage, key)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, gradients)


def compute_gradients(x: np.ndarray, ys: Sequence[SensorData], operator: AcousticOperator,
                      threads: int = 1) -> np.ndarray:
    """A*(A x_i - y_i) for every sample, in sample order."""
    def one(i: int) -> np.ndarray:
        return operator.gradient(x[i], ys[i]).data

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.stack(list(pool.map(one, range(len(ys)))))
    return np.stack([one(i) for i in range(len(ys))])


def _cached_gradients(stage: int, x: np.ndarray, ys: Sequence[SensorData], geometry: AcousticGeometry,
                      operator: AcousticOperator, cache: GradientCache, threads: int) -> np.ndarray:
    key = GradientCache.key(x, ys, geometry)
    gradients = cache.load(stage, key)
    if gradients is None:
        gradients = compute_gradients(x, ys, operator, threads)
        cache.store(stage, key, gradients)
    return gradients


def run_training_cycle(dataset: Sequence[DatasetSample], geometry: AcousticGeometry,
                       cfg: Optional[DgdConfig] = None,
                       cache_dir: Optional[Union[str, Path]] = None,
                       operator: Optional[AcousticOperator] = None,
                       threads: int = 1) -> DgdModel:
    """
    Greedy training of all stages.

    For every stage: compute (or load) the gradients at the current iterates,
    train theta_k on (x_k, grad_k, x_true), then move every sample forward
    with the trained stage.

    Args:
        dataset: Training samples (x0 = A*y is taken from each sample)
        geometry: Measurement geometry of the samples
        cfg: Hyperparameters; ``cfg.k_max`` stages are trained
        cache_dir: Directory for cached gradient stacks (None disables caching)
        operator: Operator to use (defaults to the shared one for ``geometry``)
        threads: Worker threads for gradient precomputation

    Returns:
        Trained DgdModel with per-stage loss curves and staged training losses
    """
    cfg = cfg or DgdConfig()
    if cfg.k_max < 1:
        raise PatTrainingError(f"k_max must be at least 1, got {cfg.k_max}")
    if not dataset:
        raise PatTrainingError("training set is empty")
    operator = operator or operator_for(geometry)
    cache = GradientCache(cache_dir)
    ys = [s.y for s in dataset]
    x = np.stack([s.x0.data for s in dataset])
    x_true = np.stack([s.x_true.data for s in dataset])
    stages: List[StageWeights] = []
    curves: List[List[float]] = []
    staged_losses = [mean_l2_loss(x, x_true)]
    for k in range(cfg.k_max):
        g = _cached_gradients(k, x, ys, geometry, operator, cache, threads)
        init = stages[-1] if cfg.warm_start and stages else None
        weights, curve = train_stage(k, x, g, x_true, cfg, init)
        stages.append(weights)
        curves.append(curve)
        x = apply_stage(weights, x, g)
        staged_losses.append(mean_l2_loss(x, x_true))
        logger.info("stage %d trained: mean training loss %.6g", k, staged_losses[-1])
    metadata = {
        'k_max': cfg.k_max,
        'seed': cfg.seed,
        'steps_per_stage': cfg.steps_per_stage,
        'batch': cfg.batch,
        'lr': cfg.lr,
        'loss_add_alpha': cfg.loss_add_alpha,
        'loss_add_beta': cfg.loss_add_beta,
        'warm_start': cfg.warm_start,
        'n_train': len(dataset),
        'staged_losses': staged_losses,
        'loss_curves': curves,
        'cache_hits': cache.hits,
        'cache_misses': cache.misses,
    }
    return DgdModel(stages, metadata)


def reconstruct_dgd(y: SensorData, geometry: AcousticGeometry, model: DgdModel,
                    operator: Optional[AcousticOperator] = None) -> Tuple[ScalarField, List[ScalarField]]:
    """
    Run the learned iteration x_{k+1} = G_k(A*(A x_k - y), x_k) from x0 = A*y.

    Uses exactly 2 k_max + 1 operator applications.

    Returns:
        Final iterate and the snapshots x_0 .. x_{k_max}
    """
    if model.ndim != geometry.ndim:
        raise PatShapeError(f"model works on {model.ndim}-D grids, geometry is {geometry.ndim}-D")
    operator = operator or operator_for(geometry)
    x = operator.adjoint(y)
    snapshots = [x]
    for weights in model.stages:
        g = operator.gradient(x, y)
        x = x.with_data(DgdBlock(weights).forward(x.data[None], g.data[None])[0])
        snapshots.append(x)
    return x, snapshots


def transfer_update(model: DgdModel, pairs: Sequence[Tuple[SensorData, ScalarField]],
                    geometry: AcousticGeometry, lr: float = 1e-5, epochs: int = 10,
                    cfg: Optional[DgdConfig] = None,
                    operator: Optional[AcousticOperator] = None,
                    threads: int = 1) -> DgdModel:
    """
    Fine-tune every stage in order on new (measurement, reference) pairs.

    Stage inputs are re-rolled through the already updated earlier stages. A
    stage whose update does not lower the training loss keeps its old weights,
    so ``lr = 0`` returns a bitwise identical model.

    Args:
        model: Trained model (left unmodified)
        pairs: (y_new, x_ref) pairs from the new domain
        geometry: Geometry of the new measurements
        lr: Adam learning rate
        epochs: Passes over the pairs per stage

    Returns:
        Updated copy of the model
    """
    cfg = cfg or DgdConfig()
    if not pairs:
        raise PatTrainingError("transfer training needs at least one pair")
    operator = operator or operator_for(geometry)
    ys = [y for y, _ in pairs]
    x_ref = np.stack([ref.data for _, ref in pairs])
    x = np.stack([operator.adjoint(y).data for y in ys])
    steps = epochs * -(-len(pairs) // cfg.batch)
    updated: List[StageWeights] = []
    for k, weights in enumerate(model.stages):
        g = compute_gradients(x, ys, operator, threads)
        rng = SeededRng(cfg.seed + 7919 + 1000 * k)
        candidate, _ = _optimise(weights.copy(), x, g, x_ref, steps, cfg.batch, lr, k == 0, cfg, rng,
                                 f"transfer stage {k}")
        before = mean_l2_loss(apply_stage(weights, x, g), x_ref)
        after = mean_l2_loss(apply_stage(candidate, x, g), x_ref)
        if not after < before:
            if after > before:
                logger.warning("transfer stage %d: update raised the loss (%.6g > %.6g); keeping old weights",
                               k, after, before)
            candidate = weights.copy()
        updated.append(candidate)
        x = apply_stage(candidate, x, g)
    metadata = dict(model.metadata)
    metadata['transfer'] = {'lr': lr, 'epochs': epochs, 'n_pairs': len(pairs)}
    return DgdModel(updated, metadata)


def train_joint(*args, **kwargs) -> DgdModel:
    """
    Joint optimisation of all stages through the operator.

    Raises:
        PatTrainingError: Always; every training step would need 2 k_max operator
            applications per sample. Use ``run_training_cycle``.
    """
    raise PatTrainingError(
        "joint training of all stages needs the acoustic operator inside every optimisation step "
        "and is not supported; use greedy stage-wise training (run_training_cycle)")
