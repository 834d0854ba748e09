"""A small numpy neural-network engine.

Tensors are plain float64 ``numpy.ndarray`` objects with a leading batch axis.
Conv1D/MaxPool1D operate on ``[batch, channels, length]``; Dense on
``[batch, features]``.

Canonical parameter order (shared by every flat parameter vector): layers in
ascending index, and within a layer the weights (row-major) before the biases.
Conv1D weights have shape ``(out_channels, in_channels, kernel_size)`` and
Dense weights ``(out_features, in_features)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import prod, sqrt
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError

__all__ = [
    "Conv1D",
    "ReLU",
    "MaxPool1D",
    "Flatten",
    "Dense",
    "LayerStack",
    "softmax_cross_entropy",
    "sgd_step",
    "param_count",
    "save_params",
    "load_params",
    "layer_from_dict",
    "layer_to_dict",
]


def _check_sizes(layer, **sizes):
    for name, value in sizes.items():
        if int(value) != value or value < 1:
            raise ConfigError(f"{layer}: {name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class Conv1D:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1

    def __post_init__(self):
        _check_sizes(
            "Conv1D",
            in_channels=self.in_channels,
            out_channels=self.out_channels,
            kernel_size=self.kernel_size,
            stride=self.stride,
        )

    @property
    def n_params(self) -> int:
        return self.out_channels * self.in_channels * self.kernel_size + self.out_channels

    def output_shape(self, shape):
        if len(shape) != 2 or shape[0] != self.in_channels:
            raise ConfigError(f"Conv1D expects input (channels={self.in_channels}, length), got {shape}")
        length = shape[1]
        if length < self.kernel_size:
            raise ConfigError(f"Conv1D kernel {self.kernel_size} longer than input length {length}")
        return (self.out_channels, (length - self.kernel_size) // self.stride + 1)

    @property
    def n_biases(self) -> int:
        return self.out_channels

    def fans(self):
        return self.in_channels * self.kernel_size, self.out_channels * self.kernel_size

    def _split(self, p):
        nw = self.out_channels * self.in_channels * self.kernel_size
        w = p[:nw].reshape(self.out_channels, self.in_channels, self.kernel_size)
        return w, p[nw:]

    def forward(self, p, x):
        w, b = self._split(p)
        n = x.shape[0]
        # im2col: [batch, out_len, in_ch * kernel]
        windows = sliding_window_view(x, self.kernel_size, axis=2)[:, :, :: self.stride, :]
        out_len = windows.shape[2]
        cols = windows.transpose(0, 2, 1, 3).reshape(n * out_len, -1)
        y = cols @ w.reshape(self.out_channels, -1).T + b
        return y.reshape(n, out_len, self.out_channels).transpose(0, 2, 1), (x.shape, cols)

    def backward(self, p, cache, dy):
        w, _ = self._split(p)
        x_shape, cols = cache
        n, out_len = dy.shape[0], dy.shape[2]
        dy2 = dy.transpose(0, 2, 1).reshape(n * out_len, self.out_channels)
        dw = dy2.T @ cols
        db = dy2.sum(axis=0)
        dcols = (dy2 @ w.reshape(self.out_channels, -1)).reshape(n, out_len, self.in_channels, self.kernel_size)
        dx = np.zeros(x_shape)
        span = self.stride * (out_len - 1) + 1
        for k in range(self.kernel_size):
            dx[:, :, k : k + span : self.stride] += dcols[:, :, :, k].transpose(0, 2, 1)
        return dx, np.concatenate([dw.ravel(), db])


@dataclass(frozen=True)
class ReLU:
    n_params = 0

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, p, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, dy):
        return dy * mask, np.zeros(0)


@dataclass(frozen=True)
class MaxPool1D:
    pool_size: int

    n_params = 0

    def __post_init__(self):
        _check_sizes("MaxPool1D", pool_size=self.pool_size)

    def output_shape(self, shape):
        if len(shape) != 2:
            raise ConfigError(f"MaxPool1D expects input (channels, length), got {shape}")
        if shape[1] < self.pool_size:
            raise ConfigError(f"MaxPool1D pool {self.pool_size} longer than input length {shape[1]}")
        return (shape[0], shape[1] // self.pool_size)

    def forward(self, p, x):
        n, c, length = x.shape
        out_len = length // self.pool_size
        # trailing remainder shorter than pool_size is dropped
        blocks = x[:, :, : out_len * self.pool_size].reshape(n, c, out_len, self.pool_size)
        idx = blocks.argmax(axis=3)
        y = blocks.max(axis=3)
        return y, (x.shape, idx)

    def backward(self, p, cache, dy):
        x_shape, idx = cache
        n, c, length = x_shape
        out_len = dy.shape[2]
        # gradient goes to the first maximal element of each window
        blocks = np.zeros((idx.size, self.pool_size))
        blocks[np.arange(idx.size), idx.ravel()] = dy.ravel()
        dx = np.zeros(x_shape)
        dx[:, :, : out_len * self.pool_size] = blocks.reshape(n, c, -1)
        return dx, np.zeros(0)


@dataclass(frozen=True)
class Flatten:
    n_params = 0

    def output_shape(self, shape):
        return (prod(shape),)

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, x_shape, dy):
        return dy.reshape(x_shape), np.zeros(0)


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    def __post_init__(self):
        _check_sizes("Dense", in_features=self.in_features, out_features=self.out_features)

    @property
    def n_params(self) -> int:
        return self.in_features * self.out_features + self.out_features

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ConfigError(f"Dense expects input ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    @property
    def n_biases(self) -> int:
        return self.out_features

    def fans(self):
        return self.in_features, self.out_features

    def _split(self, p):
        nw = self.in_features * self.out_features
        return p[:nw].reshape(self.out_features, self.in_features), p[nw:]

    def forward(self, p, x):
        w, b = self._split(p)
        return x @ w.T + b, x

    def backward(self, p, x, dy):
        w, _ = self._split(p)
        dw = dy.T @ x
        return dy @ w, np.concatenate([dw.ravel(), dy.sum(axis=0)])


LAYER_KINDS = {
    "conv1d": Conv1D,
    "relu": ReLU,
    "maxpool1d": MaxPool1D,
    "flatten": Flatten,
    "dense": Dense,
}


def layer_from_dict(spec: dict):
    """Build a layer from ``{"kind": "dense", "in_features": 4, ...}``."""
    spec = dict(spec)
    kind = str(spec.pop("kind", "")).lower()
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}; expected one of {sorted(LAYER_KINDS)}")
    try:
        return LAYER_KINDS[kind](**spec)
    except TypeError as exc:
        raise ConfigError(f"bad arguments for {kind}: {exc}") from None


def layer_to_dict(layer) -> dict:
    kind = next(k for k, cls in LAYER_KINDS.items() if isinstance(layer, cls))
    out = {"kind": kind}
    out.update({f: getattr(layer, f) for f in getattr(layer, "__dataclass_fields__", {})})
    return out


class LayerStack:
    """An ordered, shape-validated sequence of layers.

    ``offsets[i]`` and ``sizes[i]`` locate layer ``i``'s parameters inside the
    stack's flat parameter segment.
    """

    def __init__(self, layers: Sequence, input_shape: Sequence[int]):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ConfigError as exc:
                raise ConfigError(f"layer {i} ({type(layer).__name__}): {exc}") from None
        self.shapes = shapes
        self.sizes = [layer.n_params for layer in self.layers]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes, dtype=np.int64)]).tolist()

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def n_params(self) -> int:
        return int(self.offsets[-1])

    def __repr__(self):
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"LayerStack([{inner}], input_shape={self.input_shape})"

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        params = np.zeros(self.n_params)
        for layer, off in zip(self.layers, self.offsets):
            if not layer.n_params:
                continue
            fan_in, fan_out = layer.fans()
            bound = sqrt(6.0 / (fan_in + fan_out))
            n_weight = layer.n_params - layer.n_biases
            params[off : off + n_weight] = rng.uniform(-bound, bound, size=n_weight)
        return params

    def _segments(self, params):
        if params.shape != (self.n_params,):
            raise ConfigError(f"parameter segment has shape {params.shape}, expected ({self.n_params},)")
        return [params[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def forward(self, params: np.ndarray, x: np.ndarray):
        """Return ``(y, cache)``; the cache is consumed by :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 1 or x.shape[0] < 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ConfigError(
                f"layer 0 ({type(self.layers[0]).__name__ if self.layers else 'input'}): "
                f"input shape {tuple(x.shape[1:])} does not match declared {self.input_shape}"
            )
        caches = []
        for layer, p in zip(self.layers, self._segments(params)):
            x, c = layer.forward(p, x)
            caches.append(c)
        return x, (id(self), x.shape, caches)

    def backward(self, params: np.ndarray, cache, dy: np.ndarray):
        """Return ``(dx, dparams)`` for upstream gradient ``dy``."""
        owner, y_shape, caches = cache
        if owner != id(self) or len(caches) != len(self.layers):
            raise RuntimeError("backward called with a cache from a different stack")
        if dy.shape != y_shape:
            raise RuntimeError(f"dy shape {dy.shape} does not match forward output {y_shape}")
        grads = np.empty(self.n_params)
        segments = self._segments(params)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, dp = self.layers[i].backward(segments[i], caches[i], dy)
            grads[self.offsets[i] : self.offsets[i + 1]] = dp
        return dy, grads


def param_count(obj) -> int:
    """Trainable parameter count of a layer, stack, or multi-task model."""
    return int(obj.n_params)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Batch-mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if k < 2:
        raise ConfigError(f"cross-entropy needs at least 2 classes, got {k}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise DataError(f"row {int(bad[0])}: label {int(labels[bad[0]])} outside [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sums = exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    log_probs = shifted[rows, labels] - np.log(sums[:, 0])
    loss = -log_probs.mean()
    dlogits = exp / sums
    dlogits[rows, labels] -= 1.0
    return float(loss), dlogits / n


def sgd_step(params: np.ndarray, grads: np.ndarray, eta: float, out: np.ndarray | None = None) -> np.ndarray:
    """``params - eta * grads``; written into ``out`` when given (may alias ``params``)."""
    if params.shape != grads.shape:
        raise RuntimeError(f"gradient length {grads.shape} != parameter length {params.shape}")
    if out is None:
        return params - eta * grads
    np.subtract(params, eta * grads, out=out)
    return out


_HEADER = struct.Struct("<Q")


def save_params(path, params: np.ndarray) -> None:
    """Write a checkpoint: little-endian uint64 length then float32 values."""
    data = np.asarray(params, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(data.size))
        fh.write(data.tobytes())


def load_params(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated checkpoint header")
    (n,) = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size :]
    if len(body) != 4 * n:
        raise DataError(f"{path}: header declares {n} values but body holds {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64)
