"""
Convolutional building blocks with hand-written backpropagation.

Arrays are laid out ``(batch, channels, *grid)``. Convolutions are same-size
with zero padding and use the cross-correlation convention of CNN libraries
(the kernels are learned, so the flip is immaterial).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import PatShapeError, PatTrainingError
from .grids import SeededRng

logger = logging.getLogger(__name__)

DGD_KERNEL = 5
DGD_LAMBDA_INIT = 0.01

# (name, in_channels, out_channels) in storage order
DGD_CONVS = (
    ('x1', 1, 16),
    ('x2', 16, 32),
    ('g1', 1, 16),
    ('g2', 16, 32),
    ('m1', 32, 16),
    ('m2', 16, 1),
)


@dataclass
class ConvLayer:
    """Kernels (out_ch, in_ch, *k) with odd spatial extent and biases (out_ch,)."""
    kernels: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernels.ndim < 3:
            raise PatShapeError(f"kernels need (out, in, *spatial) axes, got {self.kernels.shape}")
        if any(k % 2 == 0 for k in self.kernels.shape[2:]):
            raise PatShapeError(f"kernel extent must be odd, got {self.kernels.shape[2:]}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise PatShapeError(f"bias shape {self.bias.shape} does not match {self.kernels.shape[0]} outputs")

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def ndim(self) -> int:
        return self.kernels.ndim - 2


def _windows(x: np.ndarray, kernel_shape: Tuple[int, ...]) -> np.ndarray:
    n = len(kernel_shape)
    pad = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in kernel_shape]
    padded = np.pad(x, pad)
    return sliding_window_view(padded, kernel_shape, axis=tuple(range(2, 2 + n)))


def _correlate(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    n = kernels.ndim - 2
    windows = _windows(x, kernels.shape[2:])
    # windows: (B, C_in, *grid, *k)
    out = np.tensordot(windows, kernels,
                       axes=([1] + list(range(2 + n, 2 + 2 * n)), [1] + list(range(2, 2 + n))))
    return np.moveaxis(out, -1, 1)


def _check_input(x: np.ndarray, layer: ConvLayer) -> None:
    if x.ndim != layer.ndim + 2:
        raise PatShapeError(f"expected a (batch, channels, *grid) array of rank {layer.ndim + 2}, got {x.shape}")
    if x.shape[1] != layer.in_channels:
        raise PatShapeError(f"layer expects {layer.in_channels} input channels, got {x.shape[1]}")


def conv_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """
    Same-size convolution ``b_i + sum_j w_ij * x_j``.

    Accepts ``(C_in, *grid)`` or batched ``(B, C_in, *grid)`` input and returns
    the matching layout with ``C_out`` channels.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == layer.ndim + 1
    batch = x[None] if single else x
    _check_input(batch, layer)
    out = _correlate(batch, layer.kernels)
    out += layer.bias.reshape((1, -1) + (1,) * layer.ndim)
    return out[0] if single else out


def conv_backward(x: np.ndarray, layer: ConvLayer,
                  upstream: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Gradients of a batched ``conv_forward`` for the given upstream gradient.

    Returns:
        (d_kernels, d_bias, d_input)
    """
    _check_input(x, layer)
    n = layer.ndim
    windows = _windows(x, layer.kernels.shape[2:])
    grid_axes = list(range(2, 2 + n))
    d_kernels = np.tensordot(upstream, windows, axes=([0] + grid_axes, [0] + grid_axes))
    d_bias = upstream.sum(axis=tuple([0] + grid_axes))
    flipped = np.flip(layer.kernels, axis=tuple(grid_axes)).swapaxes(0, 1)
    d_input = _correlate(upstream, flipped)
    return d_kernels, d_bias, d_input


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(pre: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Subgradient 0 at the kink."""
    return upstream * (pre > 0)


def max_pool_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """2x downsampling by maximum along every grid axis; returns output and argmax mask."""
    n = x.ndim - 2
    if any(s % 2 for s in x.shape[2:]):
        raise PatShapeError(f"max pooling needs even grid extents, got {x.shape[2:]}")
    shape = list(x.shape[:2])
    for s in x.shape[2:]:
        shape += [s // 2, 2]
    blocks = x.reshape(shape)
    pool_axes = tuple(3 + 2 * i for i in range(n))
    out = blocks.max(axis=pool_axes, keepdims=True)
    # first maximum per block only, so ties route the gradient to a single voxel
    hits = blocks == out
    flat = np.moveaxis(hits, pool_axes, tuple(range(-n, 0))).reshape(
        tuple(np.delete(np.array(shape), pool_axes)) + (-1,))
    first = np.zeros_like(flat)
    np.put_along_axis(first, flat.argmax(axis=-1)[..., None], True, axis=-1)
    mask = np.moveaxis(first.reshape(flat.shape[:-1] + (2,) * n), tuple(range(-n, 0)), pool_axes)
    return out.reshape(x.shape[:2] + tuple(s // 2 for s in x.shape[2:])), mask.reshape(x.shape)


def max_pool_backward(mask: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upsample_nearest(upstream) * mask


def upsample_nearest(x: np.ndarray) -> np.ndarray:
    out = x
    for axis in range(2, x.ndim):
        out = np.repeat(out, 2, axis=axis)
    return out


def upsample_nearest_backward(upstream: np.ndarray) -> np.ndarray:
    n = upstream.ndim - 2
    shape = list(upstream.shape[:2])
    for s in upstream.shape[2:]:
        shape += [s // 2, 2]
    return upstream.reshape(shape).sum(axis=tuple(3 + 2 * i for i in range(n)))


def he_normal(rng: SeededRng, out_ch: int, in_ch: int, kernel: int, ndim: int) -> np.ndarray:
    """Kernels drawn from N(0, 2 / fan_in)."""
    fan_in = in_ch * kernel ** ndim
    return rng.normal((out_ch, in_ch) + (kernel,) * ndim) * np.sqrt(2.0 / fan_in)


class ParameterSet:
    """Ordered named tensors shared by the network weight containers."""

    names: Tuple[str, ...] = ()

    def __init__(self, tensors: Dict[str, np.ndarray]):
        missing = [n for n in self.names if n not in tensors]
        if missing or len(tensors) != len(self.names):
            raise PatShapeError(f"{type(self).__name__} expects tensors {list(self.names)}, got {list(tensors)}")
        self.tensors = {n: np.asarray(tensors[n], dtype=np.float64) for n in self.names}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def layer(self, name: str) -> ConvLayer:
        return ConvLayer(self.tensors[f"{name}.w"], self.tensors[f"{name}.b"])

    def copy(self):
        return type(self)({n: t.copy() for n, t in self.tensors.items()})

    def equals(self, other: 'ParameterSet') -> bool:
        """Bitwise equality of every tensor."""
        return (type(self) is type(other)
                and all(np.array_equal(self.tensors[n], other.tensors[n]) for n in self.names))

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def _conv_names(convs) -> Tuple[str, ...]:
    names = []
    for name, _, _ in convs:
        names += [f"{name}.w", f"{name}.b"]
    return tuple(names)


class StageWeights(ParameterSet):
    """
    Parameters of one DGD stage: the x and gradient pipelines (1->16->32),
    the merge convolutions (32->16->1) and the scalar gate ``lambda``.
    """

    names = _conv_names(DGD_CONVS) + ('lambda',)

    def __init__(self, tensors: Dict[str, np.ndarray]):
        super().__init__(tensors)
        for name, c_in, c_out in DGD_CONVS:
            shape = self.tensors[f"{name}.w"].shape
            if shape[:2] != (c_out, c_in):
                raise PatShapeError(f"{name} kernels must map {c_in}->{c_out} channels, got {shape}")
        if self.tensors['lambda'].shape != () or not np.isfinite(self.tensors['lambda']):
            raise PatShapeError("lambda must be a finite scalar")

    @property
    def lam(self) -> float:
        return float(self.tensors['lambda'])

    @property
    def ndim(self) -> int:
        return self.tensors['x1.w'].ndim - 2

    @classmethod
    def zeros(cls, ndim: int = 2, kernel: int = DGD_KERNEL, lam: float = 0.0) -> 'StageWeights':
        tensors = {}
        for name, c_in, c_out in DGD_CONVS:
            tensors[f"{name}.w"] = np.zeros((c_out, c_in) + (kernel,) * ndim)
            tensors[f"{name}.b"] = np.zeros(c_out)
        tensors['lambda'] = np.array(float(lam))
        return cls(tensors)


def init_weights(rng: SeededRng, ndim: int = 2, kernel: int = DGD_KERNEL,
                 lam: float = DGD_LAMBDA_INIT) -> StageWeights:
    """He-initialised kernels, zero biases, gate ``lam``."""
    tensors = {}
    for name, c_in, c_out in DGD_CONVS:
        tensors[f"{name}.w"] = he_normal(rng, c_out, c_in, kernel, ndim)
        tensors[f"{name}.b"] = np.zeros(c_out)
    tensors['lambda'] = np.array(float(lam))
    return StageWeights(tensors)


@dataclass
class BlockCache:
    """Activations of one batched block evaluation."""
    x: np.ndarray
    g: np.ndarray
    pre: Dict[str, np.ndarray] = field(default_factory=dict)
    post: Dict[str, np.ndarray] = field(default_factory=dict)


class DgdBlock:
    """
    One learned update x_{k+1} = ReLU(x_k + lambda * net(x_k, grad_k)).

    ``forward`` takes batched ``(B, *grid)`` arrays and keeps the activations
    needed by ``backward``.
    """

    def __init__(self, weights: StageWeights):
        self.weights = weights
        self._cache: Optional[BlockCache] = None

    def _pipeline(self, prefix: str, inp: np.ndarray, cache: BlockCache) -> np.ndarray:
        h = inp[:, None]
        for i in (1, 2):
            name = f"{prefix}{i}"
            cache.post[f"{name}.in"] = h
            a = conv_forward(h, self.weights.layer(name))
            cache.pre[name] = a
            h = relu(a)
        return h

    def forward(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if x.shape != g.shape:
            raise PatShapeError(f"iterate {x.shape} and gradient {g.shape} must share dims")
        if x.ndim != self.weights.ndim + 1:
            raise PatShapeError(f"expected a batch of {self.weights.ndim}-D grids, got {x.shape}")
        cache = BlockCache(x=x, g=g)
        u = self._pipeline('x', x, cache) + self._pipeline('g', g, cache)
        cache.post['m1.in'] = u
        a3 = conv_forward(u, self.weights.layer('m1'))
        cache.pre['m1'] = a3
        h3 = relu(a3)
        cache.post['m2.in'] = h3
        c4 = conv_forward(h3, self.weights.layer('m2'))[:, 0]
        cache.post['update'] = c4
        pre = x + self.weights.lam * c4
        cache.pre['out'] = pre
        self._cache = cache
        return relu(pre)

    def _conv_grad(self, name: str, upstream: np.ndarray, grads: Dict[str, np.ndarray]) -> np.ndarray:
        d_w, d_b, d_in = conv_backward(self._cache.post[f"{name}.in"], self.weights.layer(name), upstream)
        grads[f"{name}.w"] = d_w
        grads[f"{name}.b"] = d_b
        return d_in

    def backward(self, upstream: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray, np.ndarray]:
        """
        Backpropagate ``upstream`` (gradient w.r.t. the block output).

        Returns:
            (parameter gradients by name, d x_k, d g_k)

        Raises:
            PatTrainingError: If ``forward`` has not been called
        """
        cache = self._cache
        if cache is None:
            raise PatTrainingError("backward called before forward; no activations cached")
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != cache.x.shape:
            raise PatShapeError(f"upstream {upstream.shape} does not match block output {cache.x.shape}")
        grads: Dict[str, np.ndarray] = {}
        d_pre = relu_backward(cache.pre['out'], upstream)
        grads['lambda'] = np.array(float(np.sum(d_pre * cache.post['update'])))
        d_h3 = self._conv_grad('m2', (self.weights.lam * d_pre)[:, None], grads)
        d_u = self._conv_grad('m1', relu_backward(cache.pre['m1'], d_h3), grads)
        d_inputs = {}
        for prefix in ('x', 'g'):
            d_h = d_u
            for i in (2, 1):
                name = f"{prefix}{i}"
                d_h = self._conv_grad(name, relu_backward(cache.pre[name], d_h), grads)
            d_inputs[prefix] = d_h[:, 0]
        ordered = {n: grads[n] for n in StageWeights.names}
        return ordered, d_pre + d_inputs['x'], d_inputs['g']


def dgd_block_forward(x_k: np.ndarray, g_k: np.ndarray, theta: StageWeights) -> np.ndarray:
    """Evaluate a stage on a single (unbatched) iterate and gradient image."""
    return DgdBlock(theta).forward(np.asarray(x_k)[None], np.asarray(g_k)[None])[0]


def dgd_block_backward(x_k: np.ndarray, g_k: np.ndarray, theta: StageWeights,
                       upstream: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of a single-sample stage evaluation (forward is run first)."""
    block = DgdBlock(theta)
    block.forward(np.asarray(x_k)[None], np.asarray(g_k)[None])
    grads, d_x, d_g = block.backward(np.asarray(upstream)[None])
    return grads, d_x[0], d_g[0]


def default_loss_beta(size: int) -> float:
    return 0.1 * float(np.sqrt(size))


def loss_and_grad(x_out: np.ndarray, x_true: np.ndarray, stage0: bool,
                  alpha: float = 0.01, beta: Optional[float] = None) -> Tuple[float, np.ndarray]:
    """
    Squared error, plus the small-norm penalty -alpha * min(||x|| - beta, 0) on stage 0.

    Args:
        x_out: Network output
        x_true: Target
        stage0: Add the norm penalty
        alpha: Penalty weight
        beta: Norm threshold (defaults to 0.1 * sqrt(voxel count))

    Returns:
        Loss value and its gradient w.r.t. ``x_out``
    """
    x_out = np.asarray(x_out, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    if x_out.shape != x_true.shape:
        raise PatShapeError(f"output {x_out.shape} and target {x_true.shape} differ")
    residual = x_out - x_true
    loss = float(np.sum(residual ** 2))
    grad = 2.0 * residual
    if stage0:
        beta = default_loss_beta(x_out.size) if beta is None else beta
        norm = float(np.linalg.norm(x_out))
        if norm < beta:
            loss += alpha * (beta - norm)
            if norm > 0:
                grad = grad - alpha * x_out / norm
    return loss, grad


def batch_loss_and_grad(x_out: np.ndarray, x_true: np.ndarray, stage0: bool,
                        alpha: float = 0.01, beta: Optional[float] = None) -> Tuple[float, np.ndarray]:
    """Mean per-sample loss over the leading batch axis, with its gradient."""
    losses = []
    grads = np.empty_like(np.asarray(x_out, dtype=np.float64))
    for b in range(x_out.shape[0]):
        loss, grads[b] = loss_and_grad(x_out[b], x_true[b], stage0, alpha, beta)
        losses.append(loss)
    count = len(losses)
    return float(np.mean(losses)), grads / count


@dataclass
class AdamState:
    """Moment estimates and step counter of the Adam optimiser."""
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> Dict[str, np.ndarray]:
    """
    One bias-corrected Adam update; ``state`` is advanced in place.

    Raises:
        PatShapeError: If a gradient is missing or its shape differs from its parameter
        PatTrainingError: If any gradient is non-finite
    """
    for name, p in params.items():
        if name not in grads or np.shape(grads[name]) != np.shape(p):
            raise PatShapeError(f"gradient for '{name}' is missing or mis-shaped")
        if not np.all(np.isfinite(grads[name])):
            raise PatTrainingError(f"non-finite gradient for '{name}'")
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    updated = {}
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        updated[name] = p - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return updated


def batches(n: int, batch_size: int, rng: SeededRng) -> List[np.ndarray]:
    """One epoch of shuffled mini-batch index arrays (last batch may be short)."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
