"""Stateful layer wrappers around the kernels in :mod:`dpdnet.ops`.

Each layer caches what its backward pass needs during ``forward`` and
writes parameter gradients into :class:`Parameter.grad` on ``backward``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import DTYPE


@dataclass(eq=False)
class Parameter:
    """A trainable array plus its gradient buffer.

    ``decay`` marks arrays that receive weight decay (conv and FC weights).
    """

    name: str
    value: np.ndarray
    decay: bool = True

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)


class Layer:
    name = ""

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}


class Conv(Layer):
    def __init__(self, name: str, params: ops.ConvParams, rng=None):
        self.name = name
        self.params = params
        if params.weight is None:
            if rng is None:
                raise ValueError("an rng is required to initialise fresh weights")
            params.init_weights(rng)
        self.weight = Parameter(f"{name}.weight", params.weight)
        self._x = None

    @property
    def kind(self) -> str:
        return self.params.kind

    def forward(self, x, training=False):
        self._x = x
        return ops.conv2d_forward(x, self.params)

    def backward(self, grad):
        gx, gw = ops.conv2d_backward(self._x, self.params, grad)
        self.weight.grad += gw
        return gx

    def parameters(self):
        return [self.weight]


class BatchNorm(Layer):
    def __init__(self, name: str, channels: int):
        self.name = name
        self.params = ops.BatchNormParams(channels)
        self.gamma = Parameter(f"{name}.gamma", self.params.gamma, decay=False)
        self.beta = Parameter(f"{name}.beta", self.params.beta, decay=False)
        self._x = None

    def forward(self, x, training=False):
        self._x = x
        return ops.batch_norm_forward(x, self.params, training)

    def backward(self, grad):
        gx, gg, gb = ops.batch_norm_backward(self._x, self.params, grad)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {
            f"{self.name}.running_mean": self.params.running_mean,
            f"{self.name}.running_var": self.params.running_var,
        }


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        self.name = name
        self._x = None

    def forward(self, x, training=False):
        self._x = x
        return ops.relu(x)

    def backward(self, grad):
        return ops.relu_backward(self._x, grad)


class GlobalAvgPool(Layer):
    def __init__(self, name: str = "pool"):
        self.name = name
        self._shape = None

    def forward(self, x, training=False):
        self._shape = x.shape
        return ops.global_avg_pool(x)

    def backward(self, grad):
        return ops.global_avg_pool_backward(self._shape, grad)


class Linear(Layer):
    """Fully connected classifier head with bias; weights start at N(0, 0.01^2)."""

    def __init__(self, name: str, in_features: int, out_features: int, rng):
        self.name = name
        w = rng.standard_normal((out_features, in_features), dtype=DTYPE)
        self.weight = Parameter(f"{name}.weight", w * 0.01)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features, DTYPE), decay=False)
        self._x = None

    def forward(self, x, training=False):
        self._x = x
        return ops.fully_connected(x, self.weight.value, self.bias.value)

    def backward(self, grad):
        gx, gw, gb = ops.fully_connected_backward(self._x, self.weight.value, grad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def parameters(self):
        return [self.weight, self.bias]


def run_forward(layers, x, training=False):
    for layer in layers:
        x = layer.forward(x, training)
    return x


def run_backward(layers, grad):
    for layer in reversed(layers):
        grad = layer.backward(grad)
    return grad
