"""Forward and backward kernels for the primitive layers.

All functions are pure apart from :func:`batch_norm_forward`, which updates
the running statistics of its ``BatchNormParams`` in training mode.

Convolutions come in two flavours that must agree to round-off:

* ``direct``: loops over the k*k kernel taps and accumulates strided input
  slices against that tap's weights. This is the reference path and the one
  instrumented by :func:`count_multiplies`.
* ``im2col``: gathers every receptive field into a column matrix and does a
  single matrix product.

Depthwise output channel ``c * m + j`` is multiplier slot ``j`` of input
channel ``c``.
"""
from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatchError, ShapeError, SpecError
from .tensor import DTYPE, he_normal_init

CONV_KINDS = ("standard", "pointwise", "depthwise")

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_num_threads = max(1, int(os.environ.get("DPDNET_THREADS", "1") or 1))


def set_num_threads(n: int) -> None:
    """Number of worker threads used to split convolutions over the batch."""
    global _num_threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = int(n)


def get_num_threads() -> int:
    return _num_threads


# --------------------------------------------------------------------------
# multiply instrumentation
# --------------------------------------------------------------------------


class MultiplyCounter:
    """Accumulates the number of scalar multiplies executed by the kernels."""

    def __init__(self):
        self.count = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> None:
        with self._lock:
            self.count += int(n)


_counters: list[MultiplyCounter] = []


@contextmanager
def count_multiplies():
    """Count every multiply done by direct-path convolutions and FC layers.

    >>> with count_multiplies() as counter:
    ...     _ = fully_connected(np.ones((1, 4, 1, 1)), np.ones((3, 4)), np.zeros(3))
    >>> counter.count
    12
    """
    counter = MultiplyCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tick(n: int) -> None:
    for c in _counters:
        c.add(n)


# --------------------------------------------------------------------------
# parameter containers
# --------------------------------------------------------------------------


@dataclass
class ConvParams:
    """Hyperparameters and weights of one bias-free convolution.

    ``out_channels`` is derived for depthwise layers (``multiplier * in``);
    pointwise layers always have a 1x1 kernel and no padding.
    """

    kind: str
    in_channels: int
    out_channels: int | None = None
    kernel_size: int | None = None
    stride: int = 1
    padding: int | None = None
    multiplier: int = 1
    weight: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise SpecError(f"unknown convolution kind {self.kind!r}")
        if self.in_channels < 1 or self.multiplier < 1:
            raise SpecError("channel counts and multiplier must be positive")
        if self.stride not in (1, 2):
            raise SpecError(f"stride must be 1 or 2, got {self.stride}")
        if self.kind == "pointwise":
            if self.kernel_size not in (1, None) or self.padding not in (0, None):
                raise SpecError("pointwise convolution requires k=1 and p=0")
            self.kernel_size = 1
            self.padding = 0
        elif self.kernel_size is None:
            self.kernel_size = 3
        if self.kernel_size < 1:
            raise SpecError("kernel size must be positive")
        if self.padding is None:
            self.padding = self.kernel_size // 2
        if self.kind == "depthwise":
            expected = self.multiplier * self.in_channels
            if self.out_channels not in (None, expected):
                raise SpecError(
                    f"depthwise output must be m*C = {expected}, got {self.out_channels}"
                )
            self.out_channels = expected
        elif self.out_channels is None or self.out_channels < 1:
            raise SpecError(f"{self.kind} convolution needs positive out_channels")
        elif self.multiplier != 1:
            raise SpecError("channel multiplier only applies to depthwise convolution")
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=DTYPE)
            if self.weight.shape != self.weight_shape:
                raise ShapeError(
                    f"weight shape {self.weight.shape} != expected {self.weight_shape}"
                )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        if self.kind == "depthwise":
            return (self.out_channels, 1, k, k)
        return (self.out_channels, self.in_channels, k, k)

    @property
    def fan_in(self) -> int:
        k2 = self.kernel_size * self.kernel_size
        return k2 if self.kind == "depthwise" else k2 * self.in_channels

    def init_weights(self, rng: np.random.Generator) -> "ConvParams":
        self.weight = he_normal_init(rng, self.weight_shape, self.fan_in)
        return self

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"kernel {k} larger than padded input {h + 2 * p}x{w + 2 * p}")
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


@dataclass
class BatchNormParams:
    channels: int
    gamma: np.ndarray = None
    beta: np.ndarray = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        c = self.channels
        if c < 1:
            raise SpecError("batch norm needs at least one channel")
        self.gamma = np.ones(c, DTYPE) if self.gamma is None else np.asarray(self.gamma, DTYPE)
        self.beta = np.zeros(c, DTYPE) if self.beta is None else np.asarray(self.beta, DTYPE)
        if self.running_mean is None:
            self.running_mean = np.zeros(c, DTYPE)
        if self.running_var is None:
            self.running_var = np.ones(c, DTYPE)
        for name in ("gamma", "beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ShapeError(f"{name} must have length {c}")
        if np.any(self.running_var < 0):
            raise SpecError("running_var must be non-negative")
        if self.eps <= 0 or not 0 < self.momentum < 1:
            raise SpecError("eps must be positive and momentum in (0, 1)")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _tap(xp, a, b, s, ho, wo):
    return xp[:, :, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s]


def _check_input(x, params):
    if params.weight is None:
        raise SpecError("convolution weights are not initialised")
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise ShapeError(
            f"input shape {x.shape} does not have {params.in_channels} channels"
        )
    return params.output_hw(x.shape[2], x.shape[3])


def _batch_split(fn, x, *rest):
    """Run ``fn`` over batch chunks in a thread pool and stitch results."""
    n = x.shape[0]
    threads = min(_num_threads, n)
    if threads <= 1:
        return fn(x, *rest)
    bounds = np.linspace(0, n, threads + 1).astype(int)
    chunks = [(slice(lo, hi)) for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda sl: fn(x[sl], *[r[sl] for r in rest]), chunks))
    return parts


def _forward_direct(x, params):
    ho, wo = params.output_hw(x.shape[2], x.shape[3])
    k, s = params.kernel_size, params.stride
    xp = _pad(x, params.padding)
    n, c = x.shape[:2]
    w = params.weight
    if params.kind == "depthwise":
        m = params.multiplier
        wv = w.reshape(c, m, k, k)
        out = np.zeros((n, c, m, ho, wo), DTYPE)
        for a in range(k):
            for b in range(k):
                patch = _tap(xp, a, b, s, ho, wo)
                out += patch[:, :, None] * wv[None, :, :, a, b, None, None]
                _tick(n * c * m * ho * wo)
        return out.reshape(n, c * m, ho, wo)
    o = params.out_channels
    out = np.zeros((n, o, ho * wo), DTYPE)
    for a in range(k):
        for b in range(k):
            patch = _tap(xp, a, b, s, ho, wo).reshape(n, c, ho * wo)
            out += w[:, :, a, b] @ patch
            _tick(n * o * c * ho * wo)
    return out.reshape(n, o, ho, wo)


def _windows(x, params, ho, wo):
    k, s = params.kernel_size, params.stride
    win = sliding_window_view(_pad(x, params.padding), (k, k), axis=(2, 3))
    return win[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]  # (N,C,Ho,Wo,k,k)


def _forward_im2col(x, params):
    ho, wo = params.output_hw(x.shape[2], x.shape[3])
    n, c = x.shape[:2]
    k = params.kernel_size
    win = _windows(x, params, ho, wo)
    if params.kind == "depthwise":
        m = params.multiplier
        wv = params.weight.reshape(c, m, k, k)
        out = np.einsum("nchwab,cmab->ncmhw", win, wv, optimize=True)
        return out.reshape(n, c * m, ho, wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    out = params.weight.reshape(params.out_channels, -1) @ cols
    return out.reshape(n, params.out_channels, ho, wo)


def conv2d_forward(x: np.ndarray, params: ConvParams, method: str = "direct") -> np.ndarray:
    """Bias-free 2-D convolution of an (N, C, H, W) tensor.

    Output spatial size is ``floor((H + 2p - k) / s) + 1``. ``method`` picks
    the ``"direct"`` tap loop or the ``"im2col"`` matrix-product path.
    """
    _check_input(x, params)
    if method == "direct":
        fn = _forward_direct
    elif method == "im2col":
        fn = _forward_im2col
    else:
        raise ValueError(f"unknown convolution method {method!r}")
    out = _batch_split(lambda xs: fn(xs, params), x)
    if isinstance(out, list):
        out = np.concatenate(out, axis=0)
    return out


def _backward_direct(x, g, params):
    ho, wo = g.shape[2], g.shape[3]
    k, s, p = params.kernel_size, params.stride, params.padding
    n, c, h, wd = x.shape
    xp = _pad(x, p)
    gxp = np.zeros_like(xp)
    w = params.weight
    gw = np.zeros_like(w)
    if params.kind == "depthwise":
        m = params.multiplier
        wv = w.reshape(c, m, k, k)
        gwv = gw.reshape(c, m, k, k)
        gv = g.reshape(n, c, m, ho, wo)
        for a in range(k):
            for b in range(k):
                patch = _tap(xp, a, b, s, ho, wo)
                gwv[:, :, a, b] = np.einsum("ncmhw,nchw->cm", gv, patch)
                _tap(gxp, a, b, s, ho, wo)[...] += np.einsum("ncmhw,cm->nchw", gv, wv[:, :, a, b])
    else:
        g2 = g.reshape(n, params.out_channels, ho * wo)
        for a in range(k):
            for b in range(k):
                patch = _tap(xp, a, b, s, ho, wo).reshape(n, c, ho * wo)
                gw[:, :, a, b] = np.tensordot(g2, patch, axes=([0, 2], [0, 2]))
                _tap(gxp, a, b, s, ho, wo)[...] += (w[:, :, a, b].T @ g2).reshape(n, c, ho, wo)
    return gxp[:, :, p : p + h, p : p + wd], gw


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Gradients of :func:`conv2d_forward` w.r.t. its input and weights.

    Returns ``(grad_x, grad_w)``.
    """
    ho, wo = _check_input(x, params)
    expected = (x.shape[0], params.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    parts = _batch_split(lambda xs, gs: _backward_direct(xs, gs, params), x, grad_out)
    if isinstance(parts, list):
        gx = np.concatenate([pt[0] for pt in parts], axis=0)
        gw = sum(pt[1] for pt in parts)
        return gx, gw
    return parts


# --------------------------------------------------------------------------
# batch normalisation
# --------------------------------------------------------------------------


def _bn_check(x, params, training):
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ShapeError(f"input shape {x.shape} does not have {params.channels} channels")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if training and count < 2:
        raise DegenerateBatchError(
            f"batch statistics need N*H*W >= 2 values per channel, got {count}"
        )
    return count


def batch_norm_forward(x: np.ndarray, params: BatchNormParams, training: bool) -> np.ndarray:
    """Per-channel normalisation over (N, H, W).

    In training mode batch statistics are used and the running estimates
    are updated as ``r <- momentum * r + (1 - momentum) * batch`` (unbiased
    variance for the running estimate). Inference uses the running values.
    """
    count = _bn_check(x, params, training)
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        mom = params.momentum
        params.running_mean[...] = mom * params.running_mean + (1 - mom) * mean
        params.running_var[...] = mom * params.running_var + (1 - mom) * var * count / (count - 1)
    else:
        mean, var = params.running_mean, params.running_var
    inv = 1.0 / np.sqrt(var + params.eps)
    scale = (params.gamma * inv)[None, :, None, None]
    shift = (params.beta - params.gamma * mean * inv)[None, :, None, None]
    return x * scale + shift


def batch_norm_backward(x: np.ndarray, params: BatchNormParams, grad_out: np.ndarray):
    """Training-mode gradients; returns ``(grad_x, grad_gamma, grad_beta)``."""
    count = _bn_check(x, params, True)
    if grad_out.shape != x.shape:
        raise ShapeError("grad_out must match the input shape")
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean) * inv
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    g = params.gamma[None, :, None, None]
    grad_x = (g * inv / count) * (
        count * grad_out
        - grad_beta[None, :, None, None]
        - xhat * grad_gamma[None, :, None, None]
    )
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# pointwise nonlinearity, pooling, classifier
# --------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Average every channel plane down to 1x1: (N, C, H, W) -> (N, C, 1, 1)."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"cannot pool a tensor of shape {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape, grad_out: np.ndarray) -> np.ndarray:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(grad_out / (h * w), x_shape).copy()


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map on the flattened per-sample vector; weight is (out, in)."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"FC expects {weight.shape[1]} inputs and bias of length {weight.shape[0]}"
        )
    _tick(flat.shape[0] * weight.shape[0] * weight.shape[1])
    return flat @ weight.T + bias


def fully_connected_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_weight, grad_bias)``; grad_x has x's shape."""
    flat = x.reshape(x.shape[0], -1)
    grad_x = (grad_out @ weight).reshape(x.shape)
    return grad_x, grad_out.T @ flat, grad_out.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - log_z
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
