"""Minimal layer-stack engine with reverse-mode gradients and an SGD trainer.

A :class:`Model` is an ordered, purely sequential stack of layers. Layers are
stateless descriptions; weights live in ``Model.params`` as a flat list of
numpy arrays (one per weight tensor) so gradients line up one-to-one.

Batched inputs are NCHW. A single sample (C, H, W) passed to :func:`forward`
yields a Python float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels

DTYPE = np.float32

ACTIVATIONS = ("relu", "relu6", "leaky_relu", "prelu")
LEAKY_SLOPE = 0.01
PRELU_INIT = 0.25


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class TensorError(EngineError, ValueError):
    """Bad input tensor (wrong rank, non-finite values, empty)."""


class ShapeMismatchError(EngineError, ValueError):
    def __init__(self, layer_index: int, layer: object, detail: str):
        self.layer_index = layer_index
        self.layer = layer
        super().__init__(f"layer {layer_index} ({layer!r}): {detail}")


class NumericalError(EngineError, FloatingPointError):
    def __init__(self, layer_index: int, layer: object):
        self.layer_index = layer_index
        self.layer = layer
        super().__init__(f"non-finite values produced by layer {layer_index} ({layer!r})")


class TrainingError(EngineError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}, batch {batch} (loss={loss})")


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Convert ``data`` to a contiguous array, rejecting NaN/Inf and empty input."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.size == 0:
        raise TensorError("empty tensor")
    if not np.isfinite(arr).all():
        raise TensorError("tensor contains non-finite values")
    return arr


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=DTYPE):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Layer interface. Subclasses are frozen dataclasses."""

    n_tensors = 0

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def init_params(self, rng, dtype=DTYPE) -> list:
        return []

    def forward(self, x, params, ctx):
        raise NotImplementedError

    def backward(self, dy, params, cache):
        raise NotImplementedError


@dataclass(frozen=True)
class Conv2d(Layer):
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    n_tensors = 2

    def __post_init__(self):
        if min(self.in_ch, self.out_ch, self.kernel, self.stride) <= 0 or self.padding < 0:
            raise ValueError(f"invalid Conv2d parameters: {self}")

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {c}")
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for kernel {self.kernel}")
        return (self.out_ch, ho, wo)

    def init_params(self, rng, dtype=DTYPE):
        k2 = self.kernel * self.kernel
        w = glorot_uniform(rng, (self.out_ch, self.in_ch, self.kernel, self.kernel),
                           self.in_ch * k2, self.out_ch * k2, dtype)
        return [w, np.zeros(self.out_ch, dtype=dtype)]

    def forward(self, x, params, ctx):
        w, b = params
        return kernels.conv2d_forward(x, w, b, self.stride, self.padding), x

    def backward(self, dy, params, cache):
        dx, dw, db = kernels.conv2d_backward(cache, params[0], dy, self.stride, self.padding)
        return dx, [dw, db]


@dataclass(frozen=True)
class MaxPool2d(Layer):
    kernel: int = 2
    stride: int = 2

    def output_shape(self, in_shape):
        c, h, w = in_shape
        ho = (h - self.kernel) // self.stride + 1
        wo = (w - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"feature map {h}x{w} collapses under {self.kernel}x{self.kernel} pooling")
        return (c, ho, wo)

    def forward(self, x, params, ctx):
        y, idx = kernels.maxpool2d_forward(x, self.kernel, self.stride)
        return y, (idx, x.shape)

    def backward(self, dy, params, cache):
        idx, shape = cache
        return kernels.maxpool2d_backward(dy, idx, shape, self.kernel, self.stride), []


@dataclass(frozen=True)
class FullyConnected(Layer):
    in_dim: int
    out_dim: int
    n_tensors = 2

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError(f"invalid FullyConnected dimensions: {self}")

    def output_shape(self, in_shape):
        if in_shape != (self.in_dim,):
            raise ValueError(f"expected flat input of size {self.in_dim}, got {in_shape}")
        return (self.out_dim,)

    def init_params(self, rng, dtype=DTYPE):
        w = glorot_uniform(rng, (self.out_dim, self.in_dim), self.in_dim, self.out_dim, dtype)
        return [w, np.zeros(self.out_dim, dtype=dtype)]

    def forward(self, x, params, ctx):
        w, b = params
        return x @ w.T + b, x

    def backward(self, dy, params, cache):
        w = params[0]
        return dy @ w, [dy.T @ cache, dy.sum(axis=0)]


@dataclass(frozen=True)
class Activation(Layer):
    kind: str = "relu"
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind in ("leaky_relu", "prelu") and not 0.0 < self.slope < 1.0:
            raise ValueError(f"activation slope must lie in (0, 1), got {self.slope}")

    @property
    def n_tensors(self):
        return 1 if self.kind == "prelu" else 0

    def init_params(self, rng, dtype=DTYPE):
        if self.kind == "prelu":
            return [np.full(1, self.slope, dtype=dtype)]
        return []

    def forward(self, x, params, ctx):
        if self.kind == "relu":
            y = np.maximum(x, 0)
        elif self.kind == "relu6":
            y = np.clip(x, 0, 6)
        else:
            a = params[0][0] if self.kind == "prelu" else x.dtype.type(self.slope)
            y = np.where(x >= 0, x, a * x)
        return y, x

    def backward(self, dy, params, cache):
        x = cache
        if self.kind == "relu":
            return dy * (x > 0), []
        if self.kind == "relu6":
            return dy * ((x > 0) & (x < 6)), []
        neg = x < 0
        if self.kind == "leaky_relu":
            return np.where(neg, dy * x.dtype.type(self.slope), dy), []
        a = params[0]
        da = np.array([(dy * x * neg).sum()], dtype=a.dtype)
        return np.where(neg, dy * a[0], dy), [da]


def make_activation(kind: str) -> Activation:
    """Activation layer with the default slope for its kind."""
    return Activation(kind, PRELU_INIT if kind == "prelu" else LEAKY_SLOPE)


@dataclass(frozen=True)
class Flatten(Layer):
    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, params, cache):
        return dy.reshape(cache), []


@dataclass(frozen=True)
class InputConcat(Layer):
    """Append the network input, mean-pooled by ``factor``, as extra channels.

    Gives multi-resolution access to the raw channels after a pooling stage.
    The input is not a parameter, so only the feature-map part of the
    incoming gradient is propagated.
    """

    in_channels: int
    factor: int

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c + self.in_channels, h, w)

    def forward(self, x, params, ctx):
        side = kernels.avgpool2d(ctx["input"], self.factor)
        if side.shape[2:] != x.shape[2:]:
            raise ValueError(f"downsampled input {side.shape[2:]} does not match feature map {x.shape[2:]}")
        return np.concatenate([x, side.astype(x.dtype, copy=False)], axis=1), x.shape[1]

    def backward(self, dy, params, cache):
        return np.ascontiguousarray(dy[:, :cache]), []


# ---------------------------------------------------------------------------
# model


@dataclass
class Model:
    layers: tuple
    params: list
    input_shape: tuple
    shapes: tuple = field(default=(), repr=False)

    @classmethod
    def build(cls, layers: Sequence[Layer], input_shape, rng=None, dtype=DTYPE) -> "Model":
        """Shape-check the stack and initialise weights from ``rng``."""
        rng = np.random.default_rng(rng)
        layers = tuple(layers)
        input_shape = tuple(int(s) for s in input_shape)
        shapes = [input_shape]
        for i, layer in enumerate(layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ValueError as exc:
                raise ShapeMismatchError(i, layer, str(exc)) from None
        if shapes[-1] != (1,):
            raise ShapeMismatchError(len(layers) - 1, layers[-1] if layers else None,
                                     f"model must emit a single scalar, got shape {shapes[-1]}")
        params = []
        for layer in layers:
            params.extend(layer.init_params(rng, dtype))
        return cls(layers, params, input_shape, tuple(shapes))

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    @property
    def dtype(self):
        return self.params[0].dtype if self.params else np.dtype(DTYPE)

    def copy(self) -> "Model":
        return Model(self.layers, [p.copy() for p in self.params], self.input_shape, self.shapes)

    def with_params(self, params) -> "Model":
        params = list(params)
        if len(params) != len(self.params) or any(a.shape != b.shape for a, b in zip(params, self.params)):
            raise ShapeMismatchError(-1, None, "parameter list does not match the model's weight tensors")
        return Model(self.layers, params, self.input_shape, self.shapes)

    def astype(self, dtype) -> "Model":
        return self.with_params([p.astype(dtype) for p in self.params])

    def layer_params(self):
        """Yield ``(layer, its weight tensors)`` in order."""
        pos = 0
        for layer in self.layers:
            n = layer.n_tensors
            yield layer, self.params[pos:pos + n]
            pos += n


def _check_input(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == len(model.input_shape)
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != model.input_shape:
        first = model.layers[0] if model.layers else None
        raise ShapeMismatchError(0, first, f"input shape {tuple(x.shape[1:])} != declared {model.input_shape}")
    if not np.isfinite(x).all():
        raise TensorError("input contains non-finite values")
    return np.ascontiguousarray(x, dtype=model.dtype), single


def _run(model: Model, x: np.ndarray, keep_caches: bool):
    ctx = {"input": x}
    caches = []
    for i, (layer, params) in enumerate(model.layer_params()):
        try:
            # overflow is reported below as NumericalError, not as a warning
            with np.errstate(over="ignore", invalid="ignore"):
                x, cache = layer.forward(x, params, ctx)
        except ValueError as exc:
            raise ShapeMismatchError(i, layer, str(exc)) from None
        if not np.isfinite(x).all():
            raise NumericalError(i, layer)
        if keep_caches:
            caches.append(cache)
    return x, caches


def predict(model: Model, x) -> np.ndarray:
    """Batched forward pass: (N, C, H, W) -> (N,)."""
    x, _ = _check_input(model, x)
    y, _ = _run(model, x, keep_caches=False)
    return y[:, 0]


def forward(model: Model, x):
    """Forward pass. A single (C, H, W) sample returns a float; a batch returns (N,)."""
    arr, single = _check_input(model, x)
    y, _ = _run(model, arr, keep_caches=False)
    return float(y[0, 0]) if single else y[:, 0]


def loss_and_grads(model: Model, x, target) -> tuple[float, list]:
    """Mean squared error over the batch and its gradient for every weight tensor."""
    x, _ = _check_input(model, x)
    target = np.asarray(target, dtype=model.dtype).reshape(-1)
    if target.shape[0] != x.shape[0]:
        raise ShapeMismatchError(len(model.layers) - 1, None,
                                 f"{target.shape[0]} targets for {x.shape[0]} inputs")
    y, caches = _run(model, x, keep_caches=True)
    resid = y[:, 0] - target
    loss = float(np.mean(resid.astype(np.float64) ** 2))
    dy = (2.0 / x.shape[0] * resid)[:, None].astype(model.dtype)
    grads = []
    pos = len(model.params)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(len(model.layers) - 1, -1, -1):
            layer = model.layers[i]
            n = layer.n_tensors
            params = model.params[pos - n:pos]
            dy, g = layer.backward(dy, params, caches[i])
            grads[:0] = g
            pos -= n
    return loss, grads


def backward(model: Model, x, target) -> list:
    """Gradients of the MSE loss, one array per weight tensor (same shapes)."""
    return loss_and_grads(model, x, target)[1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    max_learning_rate: float = 1.0
    max_weight_decay: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= self.max_learning_rate:
            raise ValueError(f"learning_rate {self.learning_rate} outside (0, {self.max_learning_rate}]")
        if not 0.0 <= self.weight_decay <= self.max_weight_decay:
            raise ValueError(f"weight_decay {self.weight_decay} outside [0, {self.max_weight_decay}]")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def sgd_step(model: Model, grads, cfg: TrainConfig) -> Model:
    """Return a new model with ``w - lr * (g + weight_decay * w)`` applied to every tensor."""
    if len(grads) != len(model.params):
        raise ShapeMismatchError(-1, None, f"{len(grads)} gradients for {len(model.params)} tensors")
    lr = model.dtype.type(cfg.learning_rate)
    wd = model.dtype.type(cfg.weight_decay)
    new = []
    for p, g in zip(model.params, grads):
        if p.shape != g.shape:
            raise ShapeMismatchError(-1, None, f"gradient shape {g.shape} != weight shape {p.shape}")
        new.append(p - lr * (g + wd * p))
    return model.with_params(new)


def train(model: Model, train_set, cfg: TrainConfig) -> Model:
    """Mini-batch SGD over ``train_set`` (anything with ``.x`` and ``.target``).

    Shuffling is drawn from ``cfg.seed`` so two runs with identical inputs
    produce bit-identical weights.
    """
    if cfg.epochs == 0:
        return model
    x = np.asarray(train_set.x)
    t = np.asarray(train_set.target)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    lr = model.dtype.type(cfg.learning_rate)
    wd = model.dtype.type(cfg.weight_decay)
    model = model.copy()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                loss, grads = loss_and_grads(model, x[idx], t[idx])
            except NumericalError:
                raise TrainingError(epoch, b, math.inf) from None
            if not math.isfinite(loss):
                raise TrainingError(epoch, b, loss)
            with np.errstate(over="ignore", invalid="ignore"):
                for p, g in zip(model.params, grads):
                    p -= lr * (g + wd * p)
                    if not np.isfinite(p).all():
                        raise TrainingError(epoch, b, loss)
    return model
