"""Small numpy neural-network core.

Models are described by a frozen :class:`ModelSpec` and evaluated over a flat
float64 parameter vector, so aggregation, projection and distances all work on
plain 1-D arrays. Backpropagation is written by hand for the handful of layer
kinds the simulator needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericalError

ParamVector = np.ndarray


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Conv:
    """k x k convolution with zero padding k // 2."""

    channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    size: int = 2


Layer = Dense | Conv | ReLU | MaxPool


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    num_classes: int

    def __post_init__(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        _plan(self)  # validates the layer chain

    @property
    def input_size(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    @property
    def num_params(self) -> int:
        return _plan(self).num_params


def dense_spec(num_classes: int = 3, image_shape=(1, 16, 16), hidden=(256, 64)) -> ModelSpec:
    """Default model: fully connected ReLU network."""
    layers: list[Layer] = []
    for width in hidden:
        layers += [Dense(width), ReLU()]
    layers.append(Dense(num_classes))
    return ModelSpec(tuple(image_shape), tuple(layers), num_classes)


def conv_spec(num_classes: int = 3, image_shape=(1, 16, 16), channels=(8, 16, 16, 16), head: int = 32,
              stride: int = 2) -> ModelSpec:
    """Strided 3x3 conv blocks (conv, ReLU) followed by a two-layer head."""
    layers: list[Layer] = []
    for ch in channels:
        layers += [Conv(ch, 3, stride), ReLU()]
    layers += [Dense(head), ReLU(), Dense(num_classes)]
    return ModelSpec(tuple(image_shape), tuple(layers), num_classes)


class _Step(NamedTuple):
    layer: Layer
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    w_slice: slice | None
    w_shape: tuple[int, ...] | None
    b_slice: slice | None


@dataclass(frozen=True)
class _Plan:
    steps: tuple[_Step, ...]
    num_params: int


@lru_cache(maxsize=64)
def _plan(spec: ModelSpec) -> _Plan:
    # Activations are kept channels-last (H, W, C) internally.
    c, h, w = spec.input_shape
    shape: tuple[int, ...] = (h, w, c)
    offset = 0
    steps = []
    for layer in spec.layers:
        w_slice = b_slice = w_shape = None
        if isinstance(layer, Dense):
            if layer.units < 1:
                raise ConfigError("Dense units must be positive")
            w_shape = (int(np.prod(shape)), layer.units)
            out: tuple[int, ...] = (layer.units,)
            n_b = layer.units
        elif isinstance(layer, Conv):
            if len(shape) != 3:
                raise ConfigError("Conv layer needs a spatial input")
            if layer.kernel % 2 != 1 or layer.channels < 1 or layer.stride < 1:
                raise ConfigError("Conv kernel must be odd, channels and stride positive")
            w_shape = (layer.kernel * layer.kernel * shape[2], layer.channels)
            s = layer.stride
            out = (-(-shape[0] // s), -(-shape[1] // s), layer.channels)
            n_b = layer.channels
        elif isinstance(layer, ReLU):
            out = shape
        elif isinstance(layer, MaxPool):
            if len(shape) != 3 or shape[0] % layer.size or shape[1] % layer.size:
                raise ConfigError(f"MaxPool({layer.size}) does not tile input {shape}")
            out = (shape[0] // layer.size, shape[1] // layer.size, shape[2])
        else:
            raise ConfigError(f"unknown layer {layer!r}")
        if w_shape is not None:
            n_w = w_shape[0] * w_shape[1]
            w_slice = slice(offset, offset + n_w)
            b_slice = slice(offset + n_w, offset + n_w + n_b)
            offset += n_w + n_b
        steps.append(_Step(layer, shape, out, w_slice, w_shape, b_slice))
        shape = out
    if shape != (spec.num_classes,):
        raise ConfigError(f"network output shape {shape} does not match num_classes={spec.num_classes}")
    return _Plan(tuple(steps), offset)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.num_params)
    for step in _plan(spec).steps:
        if step.w_shape is None:
            continue
        if isinstance(step.layer, Conv):
            k2 = step.layer.kernel ** 2
            fan_in, fan_out = step.w_shape[0], step.layer.channels * k2
        else:
            fan_in, fan_out = step.w_shape
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[step.w_slice] = rng.uniform(-bound, bound, size=step.w_shape[0] * step.w_shape[1])
    return params


class Batch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray


def _check(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise ConfigError(f"expected {spec.num_params} parameters, got shape {params.shape}")
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim < 2 or x.size != x.shape[0] * spec.input_size:
        raise ConfigError(f"inputs of shape {x.shape} do not match input_shape {spec.input_shape}")
    return x.reshape((x.shape[0],) + tuple(spec.input_shape)).transpose(0, 2, 3, 1)


def _im2col(x: np.ndarray, k: int, s: int) -> np.ndarray:
    b, h, w, c = x.shape
    p = k // 2
    # manual zero padding; np.pad is several times slower at these sizes
    xp = np.zeros((b, h + 2 * p, w + 2 * p, c))
    xp[:, p:p + h, p:p + w, :] = x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]  # (B, Ho, Wo, C, k, k)
    ho, wo = win.shape[1], win.shape[2]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * c)


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...], k: int, s: int) -> np.ndarray:
    b, h, w, c = x_shape
    p = k // 2
    ho, wo = -(-h // s), -(-w // s)
    # one contiguous slab per kernel offset; accumulation order is unchanged
    d = dcols.reshape(b, ho, wo, k * k, c).transpose(3, 0, 1, 2, 4).copy()
    dxp = np.zeros((b, h + 2 * p, w + 2 * p, c))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += d[i * k + j]
    return dxp[:, p:p + h, p:p + w, :]


def _pool_forward(x: np.ndarray, s: int):
    # first maximum in row-major window order wins ties
    best = x[:, 0::s, 0::s, :].copy()
    idx = np.zeros(best.shape, dtype=np.int8)
    for k in range(1, s * s):
        view = x[:, k // s::s, k % s::s, :]
        upd = view > best
        best[upd] = view[upd]
        idx[upd] = k
    return best, idx


def _pool_backward(dout: np.ndarray, idx: np.ndarray, x_shape, s: int) -> np.ndarray:
    dx = np.zeros(x_shape)
    for k in range(s * s):
        dx[:, k // s::s, k % s::s, :] = dout * (idx == k)
    return dx


def _forward(spec: ModelSpec, params: ParamVector, x: np.ndarray, keep: bool):
    caches = []
    for step in _plan(spec).steps:
        layer = step.layer
        if isinstance(layer, Dense):
            a = x.reshape(x.shape[0], -1)
            W = params[step.w_slice].reshape(step.w_shape)
            out = a @ W + params[step.b_slice]
            cache = a
        elif isinstance(layer, Conv):
            cols = _im2col(x, layer.kernel, layer.stride)
            W = params[step.w_slice].reshape(step.w_shape)
            out = (cols @ W + params[step.b_slice]).reshape((x.shape[0],) + step.out_shape)
            cache = cols
        elif isinstance(layer, ReLU):
            mask = x > 0
            out = x * mask
            cache = mask
        else:
            out, cache = _pool_forward(x, layer.size)
        if keep:
            caches.append((cache, x.shape))
        x = out
    return x, caches


def _backward(spec: ModelSpec, params: ParamVector, caches, dout: np.ndarray) -> ParamVector:
    grad = np.zeros_like(params)
    steps = _plan(spec).steps
    last = len(steps) - 1
    for pos, (step, (cache, x_shape)) in enumerate(zip(reversed(steps), reversed(caches))):
        layer = step.layer
        need_dx = pos != last
        if isinstance(layer, Dense):
            grad[step.w_slice] = (cache.T @ dout).ravel()
            grad[step.b_slice] = dout.sum(axis=0)
            if need_dx:
                dout = (dout @ params[step.w_slice].reshape(step.w_shape).T).reshape(x_shape)
        elif isinstance(layer, Conv):
            d2 = dout.reshape(-1, layer.channels)
            grad[step.w_slice] = (cache.T @ d2).ravel()
            grad[step.b_slice] = d2.sum(axis=0)
            if need_dx:
                dout = _col2im(d2 @ params[step.w_slice].reshape(step.w_shape).T, x_shape, layer.kernel, layer.stride)
        elif isinstance(layer, ReLU):
            dout = dout * cache
        else:
            dout = _pool_backward(dout, cache, x_shape, layer.size)
    return grad


def forward(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Logits of shape (batch, num_classes)."""
    x = _check(spec, params, inputs)
    logits, _ = _forward(spec, params, x, keep=False)
    return logits


def predict(spec: ModelSpec, params: ParamVector, inputs: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Argmax class per row; np.argmax breaks ties toward the lowest index."""
    out = [forward(spec, params, inputs[i:i + chunk]).argmax(axis=1) for i in range(0, len(inputs), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def kl_divergence(p_logits, q_logits) -> float:
    """KL(softmax(p) || softmax(q)) for two logit vectors."""
    p_logits = np.asarray(p_logits, dtype=np.float64)
    q_logits = np.asarray(q_logits, dtype=np.float64)
    if p_logits.shape != q_logits.shape or p_logits.ndim != 1 or p_logits.size < 2:
        raise ConfigError("kl_divergence needs two equal-length logit vectors of length >= 2")
    lp, lq = log_softmax(p_logits), log_softmax(q_logits)
    return max(float(np.sum(np.exp(lp) * (lp - lq))), 0.0)


def loss_and_grad(
    spec: ModelSpec,
    params: ParamVector,
    batch: Batch,
    loss: str = "cross_entropy",
    ref_logits: np.ndarray | None = None,
) -> tuple[float, ParamVector]:
    """Mean batch loss and its exact gradient with respect to ``params``.

    ``loss="kl"`` computes mean KL(softmax(ref_logits) || softmax(f(x))). The
    reference side is a constant, so gradient only flows through the model
    evaluated on ``batch.inputs``.
    """
    x = _check(spec, params, batch.inputs)
    n = x.shape[0]
    if n == 0:
        raise ConfigError("empty batch")
    logits, caches = _forward(spec, params, x, keep=True)
    logq = log_softmax(logits)
    if loss == "cross_entropy":
        labels = np.asarray(batch.labels, dtype=np.int64)
        if labels.shape != (n,) or labels.min() < 0 or labels.max() >= spec.num_classes:
            raise ConfigError("labels must be a vector of class indices matching the batch")
        value = -float(logq[np.arange(n), labels].sum()) / n
        dlogits = np.exp(logq)
        dlogits[np.arange(n), labels] -= 1.0
    elif loss == "kl":
        if ref_logits is None or np.shape(ref_logits) != logits.shape:
            raise ConfigError("kl loss needs ref_logits with the same shape as the logits")
        logp = log_softmax(np.asarray(ref_logits, dtype=np.float64))
        p = np.exp(logp)
        value = float(np.sum(p * (logp - logq))) / n
        dlogits = np.exp(logq) - p
    else:
        raise ConfigError(f"unknown loss {loss!r}")
    dlogits /= n
    grad = _backward(spec, params, caches, dlogits)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {loss} loss")
    return value, grad


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")


def make_optimizer(kind: str, learning_rate: float, size: int) -> OptimizerState:
    state = OptimizerState(kind, learning_rate)
    if kind == "adam":
        state.m = np.zeros(size)
        state.v = np.zeros(size)
    return state


def optimizer_step(state: OptimizerState, params: ParamVector, grad: ParamVector, direction: str = "descent") -> ParamVector:
    """Return updated parameters; Adam moments in ``state`` advance in place."""
    if params.shape != grad.shape:
        raise ConfigError("params and grad lengths differ")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient")
    if direction == "descent":
        sign = -1.0
    elif direction == "ascent":
        sign = 1.0
    else:
        raise ConfigError(f"direction must be 'descent' or 'ascent', got {direction!r}")

    if state.kind == "sgd":
        update = grad
    else:
        if state.m is None or state.m.shape != params.shape:
            state.m = np.zeros_like(params)
            state.v = np.zeros_like(params)
        state.step_count += 1
        state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
        m_hat = state.m / (1.0 - state.beta1 ** state.step_count)
        v_hat = state.v / (1.0 - state.beta2 ** state.step_count)
        update = m_hat / (np.sqrt(v_hat) + state.eps)
    out = params + sign * state.learning_rate * update
    if not np.all(np.isfinite(out)):
        raise NumericalError("parameters became non-finite")
    return out


def l2_distance(a: ParamVector, b: ParamVector) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return math.sqrt(float(np.dot(d, d)))


def mean_params(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Weighted average in a fixed summation order (list order)."""
    w = np.asarray(weights, dtype=np.float64)
    if len(vectors) == 0 or len(vectors) != len(w) or w.sum() <= 0:
        raise ConfigError("need matching, positively weighted vectors")
    total = np.zeros_like(np.asarray(vectors[0], dtype=np.float64))
    for vec, wk in zip(vectors, w):
        total += wk * vec
    return total / w.sum()
