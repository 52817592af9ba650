"""
Residual U-Net post-processing of the adjoint reconstruction.
"""

import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .acoustics import AcousticOperator, operator_for
from .config import UnetConfig
from .exceptions import PatFormatError, PatShapeError, PatTrainingError
from .grids import SeededRng
from .layers import (AdamState, ParameterSet, adam_step, batch_loss_and_grad, batches, conv_backward,
                     conv_forward, he_normal, max_pool_backward, max_pool_forward, relu,
                     relu_backward, upsample_nearest, upsample_nearest_backward)
from .models import AcousticGeometry, ScalarField, SensorData
from .weights_io import UNET_MAGIC, StageTensors, to_storage_precision

logger = logging.getLogger(__name__)

UNET_KERNEL = 3
UNET_SCALE_INIT = 0.01
EVAL_CHUNK = 4

UNET_CONVS = (
    ('e1a', 1, 8), ('e1b', 8, 8),
    ('e2a', 8, 16), ('e2b', 16, 16),
    ('b1', 16, 32), ('b2', 32, 32),
    ('u2', 32, 16), ('d2a', 32, 16), ('d2b', 16, 16),
    ('u1', 16, 8), ('d1a', 16, 8), ('d1b', 8, 8),
    ('out', 8, 1),
)


class UnetWeights(ParameterSet):
    """Three-level encoder-decoder (8/16/32 channels, 3x3 kernels) with a residual output gate."""

    MAGIC = UNET_MAGIC
    names = tuple(n for name, _, _ in UNET_CONVS for n in (f"{name}.w", f"{name}.b")) + ('scale',)

    def __init__(self, tensors: Dict[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None):
        super().__init__(tensors)
        for name, c_in, c_out in UNET_CONVS:
            shape = self.tensors[f"{name}.w"].shape
            if shape[:2] != (c_out, c_in):
                raise PatShapeError(f"{name} kernels must map {c_in}->{c_out} channels, got {shape}")
        self.metadata = dict(metadata or {})

    @property
    def scale(self) -> float:
        return float(self.tensors['scale'])

    @property
    def ndim(self) -> int:
        return self.tensors['e1a.w'].ndim - 2

    def copy(self) -> 'UnetWeights':
        return UnetWeights({n: t.copy() for n, t in self.tensors.items()}, dict(self.metadata))

    def stage_tensors(self) -> List[StageTensors]:
        return [self.tensors]

    @classmethod
    def from_stage_tensors(cls, stages: List[StageTensors]) -> 'UnetWeights':
        if len(stages) != 1:
            raise PatFormatError(f"a U-Net file holds exactly one stage, found {len(stages)}")
        try:
            return cls(stages[0])
        except PatShapeError as e:
            raise PatFormatError(f"weights do not describe a U-Net: {e}")

    @classmethod
    def zeros(cls, ndim: int = 2, kernel: int = UNET_KERNEL) -> 'UnetWeights':
        tensors = {}
        for name, c_in, c_out in UNET_CONVS:
            tensors[f"{name}.w"] = np.zeros((c_out, c_in) + (kernel,) * ndim)
            tensors[f"{name}.b"] = np.zeros(c_out)
        tensors['scale'] = np.array(0.0)
        return cls(tensors)

    @classmethod
    def initialize(cls, rng: SeededRng, ndim: int = 2, kernel: int = UNET_KERNEL) -> 'UnetWeights':
        tensors = {}
        for name, c_in, c_out in UNET_CONVS:
            tensors[f"{name}.w"] = he_normal(rng, c_out, c_in, kernel, ndim)
            tensors[f"{name}.b"] = np.zeros(c_out)
        tensors['scale'] = np.array(UNET_SCALE_INIT)
        return cls(tensors)


class Unet:
    """Batched forward and backward pass over ``(B, *grid)`` inputs."""

    def __init__(self, weights: UnetWeights):
        self.weights = weights
        self._inputs: Dict[str, np.ndarray] = {}
        self._pre: Dict[str, np.ndarray] = {}
        self._masks: Dict[str, np.ndarray] = {}
        self._cached = False

    def _conv(self, name: str, h: np.ndarray, activate: bool = True) -> np.ndarray:
        self._inputs[name] = h
        a = conv_forward(h, self.weights.layer(name))
        self._pre[name] = a
        return relu(a) if activate else a

    def _conv_back(self, name: str, d: np.ndarray, grads: Dict[str, np.ndarray],
                   activated: bool = True) -> np.ndarray:
        if activated:
            d = relu_backward(self._pre[name], d)
        d_w, d_b, d_in = conv_backward(self._inputs[name], self.weights.layer(name), d)
        grads[f"{name}.w"] = d_w
        grads[f"{name}.b"] = d_b
        return d_in

    def forward(self, x0: np.ndarray) -> np.ndarray:
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.ndim != self.weights.ndim + 1:
            raise PatShapeError(f"expected a batch of {self.weights.ndim}-D grids, got {x0.shape}")
        if any(s % 4 for s in x0.shape[1:]):
            raise PatShapeError(f"U-Net grids must be divisible by 4 along every axis, got {x0.shape[1:]}")
        s1 = self._conv('e1b', self._conv('e1a', x0[:, None]))
        p1, self._masks['p1'] = max_pool_forward(s1)
        s2 = self._conv('e2b', self._conv('e2a', p1))
        p2, self._masks['p2'] = max_pool_forward(s2)
        b = self._conv('b2', self._conv('b1', p2))
        u2 = self._conv('u2', upsample_nearest(b))
        d2 = self._conv('d2b', self._conv('d2a', np.concatenate([u2, s2], axis=1)))
        u1 = self._conv('u1', upsample_nearest(d2))
        d1 = self._conv('d1b', self._conv('d1a', np.concatenate([u1, s1], axis=1)))
        residual = self._conv('out', d1, activate=False)[:, 0]
        self._inputs['residual'] = residual
        pre = x0 + self.weights.scale * residual
        self._pre['output'] = pre
        self._cached = True
        return relu(pre)

    def backward(self, upstream: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """
        Returns:
            (parameter gradients by name, d x0)

        Raises:
            PatTrainingError: If ``forward`` has not been called
        """
        if not self._cached:
            raise PatTrainingError("backward called before forward; no activations cached")
        grads: Dict[str, np.ndarray] = {}
        d_pre = relu_backward(self._pre['output'], np.asarray(upstream, dtype=np.float64))
        grads['scale'] = np.array(float(np.sum(d_pre * self._inputs['residual'])))
        d_d1 = self._conv_back('out', (self.weights.scale * d_pre)[:, None], grads, activated=False)
        d_cat1 = self._conv_back('d1a', self._conv_back('d1b', d_d1, grads), grads)
        d_u1, d_s1 = d_cat1[:, :8], d_cat1[:, 8:]
        d_d2 = upsample_nearest_backward(self._conv_back('u1', d_u1, grads))
        d_cat2 = self._conv_back('d2a', self._conv_back('d2b', d_d2, grads), grads)
        d_u2, d_s2 = d_cat2[:, :16], d_cat2[:, 16:]
        d_b = upsample_nearest_backward(self._conv_back('u2', d_u2, grads))
        d_p2 = self._conv_back('b1', self._conv_back('b2', d_b, grads), grads)
        d_s2 = d_s2 + max_pool_backward(self._masks['p2'], d_p2)
        d_p1 = self._conv_back('e2a', self._conv_back('e2b', d_s2, grads), grads)
        d_s1 = d_s1 + max_pool_backward(self._masks['p1'], d_p1)
        d_h = self._conv_back('e1a', self._conv_back('e1b', d_s1, grads), grads)
        ordered = {n: grads[n] for n in UnetWeights.names}
        return ordered, d_pre + d_h[:, 0]


def unet_forward(x0: np.ndarray, w: UnetWeights) -> np.ndarray:
    """x_post = ReLU(x0 + scale * net(x0)) for a single grid."""
    return Unet(w).forward(np.asarray(x0)[None])[0]


def apply_unet(w: UnetWeights, x0: np.ndarray, chunk: int = EVAL_CHUNK) -> np.ndarray:
    net = Unet(w)
    return np.concatenate([net.forward(x0[i:i + chunk]) for i in range(0, len(x0), chunk)])


def _mean_l2(x: np.ndarray, x_true: np.ndarray) -> float:
    return float(np.mean(np.sum((x - x_true).reshape(len(x), -1) ** 2, axis=1)))


def _fit(w: UnetWeights, x0: np.ndarray, x_true: np.ndarray, epochs: int, batch: int, lr: float,
         cfg: UnetConfig, rng: SeededRng, label: str) -> Tuple[UnetWeights, List[float]]:
    params = dict(w.tensors)
    state = AdamState(lr=lr)
    curve: List[float] = []
    for epoch in range(epochs):
        losses = []
        for idx in batches(len(x0), batch, rng):
            net = Unet(UnetWeights(params))
            out = net.forward(x0[idx])
            loss, upstream = batch_loss_and_grad(out, x_true[idx], True, cfg.loss_add_alpha,
                                                 cfg.loss_add_beta)
            grads, _ = net.backward(upstream)
            params = adam_step(params, grads, state)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
        logger.info("%s epoch %d/%d: loss %.6g", label, epoch + 1, epochs, curve[-1])
    return UnetWeights(to_storage_precision(params)), curve


def train_unet(x0: np.ndarray, x_true: np.ndarray,
               cfg: Optional[UnetConfig] = None) -> Tuple[UnetWeights, List[float]]:
    """
    Train on pairs (x0_i, x_true_i) with Adam on loss + loss_add.

    Args:
        x0: Adjoint reconstructions, shape (N, *grid)
        x_true: Targets, same shape
        cfg: Epochs, learning rate, batch size and seed

    Returns:
        Trained weights and the per-epoch mean loss
    """
    cfg = cfg or UnetConfig()
    if len(x0) == 0:
        raise PatTrainingError("U-Net training set is empty")
    if x0.shape != x_true.shape:
        raise PatShapeError(f"inputs {x0.shape} and targets {x_true.shape} differ")
    rng = SeededRng(cfg.seed)
    w = UnetWeights.initialize(rng, ndim=x0.ndim - 1)
    trained, curve = _fit(w, x0, x_true, cfg.epochs, cfg.batch, cfg.lr, cfg, rng, "unet")
    identity = UnetWeights.zeros(trained.ndim)
    trained_loss = _mean_l2(apply_unet(trained, x0), x_true)
    identity_loss = _mean_l2(apply_unet(identity, x0), x_true)
    if trained_loss > identity_loss:
        logger.warning("unet: trained loss %.6g exceeds zero-update loss %.6g; keeping the zero update",
                       trained_loss, identity_loss)
        trained = identity
    trained.metadata = {'epochs': cfg.epochs, 'lr': cfg.lr, 'batch': cfg.batch, 'seed': cfg.seed,
                        'n_train': len(x0), 'loss_curve': curve}
    return trained, curve


def transfer_update_unet(w: UnetWeights, pairs: Sequence[Tuple[ScalarField, ScalarField]],
                         lr: float = 1e-5, epochs: int = 10,
                         cfg: Optional[UnetConfig] = None) -> UnetWeights:
    """
    Fine-tune on (x0_new, x_ref) pairs; keeps the old weights unless the loss drops.
    """
    cfg = cfg or UnetConfig()
    if not pairs:
        raise PatTrainingError("transfer training needs at least one pair")
    x0 = np.stack([p[0].data for p in pairs])
    x_ref = np.stack([p[1].data for p in pairs])
    rng = SeededRng(cfg.seed + 7919)
    candidate, _ = _fit(w.copy(), x0, x_ref, epochs, cfg.batch, lr, cfg, rng, "unet transfer")
    before = _mean_l2(apply_unet(w, x0), x_ref)
    after = _mean_l2(apply_unet(candidate, x0), x_ref)
    if not after < before:
        if after > before:
            logger.warning("unet transfer: update raised the loss (%.6g > %.6g); keeping old weights",
                           after, before)
        candidate = w.copy()
    candidate.metadata = dict(w.metadata)
    candidate.metadata['transfer'] = {'lr': lr, 'epochs': epochs, 'n_pairs': len(pairs)}
    return candidate


def reconstruct_unet(y: SensorData, geometry: AcousticGeometry, w: UnetWeights,
                     operator: Optional[AcousticOperator] = None) -> Tuple[ScalarField, ScalarField]:
    """Post-process x0 = A*y; one operator application. Returns (x_post, x0)."""
    operator = operator or operator_for(geometry)
    x0 = operator.adjoint(y)
    return x0.with_data(unet_forward(x0.data, w)), x0
