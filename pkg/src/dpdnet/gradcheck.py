"""Central finite-difference checks for every op and block kind.

Each check contracts the op's output with a fixed random tensor ``R`` to
get a scalar loss ``L = sum(out * R)``, then compares the analytic gradient
of ``L`` with ``(L(x + h) - L(x - h)) / 2h`` entry by entry.

The per-entry relative error is ``|a - n| / max(|a|, |n|, FLOOR)``: the
floor stops entries whose true gradient is ~0 from turning round-off into a
huge relative error.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .arch import HeadSpec, NetworkSpec, StageSpec, StemSpec, build_network
from .blocks import BLOCK_KINDS, BlockSpec, build_block
from .ops import BatchNormParams, ConvParams
from .tensor import make_rng

STEP = 1e-5
TOLERANCE = 1e-5
FLOOR = 1e-3


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    """Largest per-entry relative error between two gradient arrays."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _projection(rng, shape):
    return rng.standard_normal(shape)


def check_conv(rng, kind, c=2, out=3, m=1, stride=1, hw=5, n=2) -> float:
    params = ConvParams(kind, c, None if kind == "depthwise" else out, stride=stride,
                        multiplier=m).init_weights(rng)
    x = rng.standard_normal((n, c, hw, hw))
    r = _projection(rng, ops.conv2d_forward(x, params).shape)

    def loss():
        return float(np.sum(ops.conv2d_forward(x, params) * r))

    gx, gw = ops.conv2d_backward(x, params, r)
    return max(rel_error(gx, numeric_grad(loss, x)),
               rel_error(gw, numeric_grad(loss, params.weight)))


def check_batch_norm(rng, c=3, n=2, hw=3) -> float:
    params = BatchNormParams(c, gamma=rng.uniform(0.5, 1.5, c), beta=rng.standard_normal(c))
    x = rng.standard_normal((n, c, hw, hw)) * 2 + 0.5
    r = _projection(rng, x.shape)

    def loss():
        return float(np.sum(ops.batch_norm_forward(x, params, True) * r))

    gx, gg, gb = ops.batch_norm_backward(x, params, r)
    return max(rel_error(gx, numeric_grad(loss, x)),
               rel_error(gg, numeric_grad(loss, params.gamma)),
               rel_error(gb, numeric_grad(loss, params.beta)))


def check_relu(rng) -> float:
    # keep inputs away from the kink at 0
    x = rng.uniform(0.1, 1.0, (2, 3, 4, 4)) * rng.choice([-1.0, 1.0], (2, 3, 4, 4))
    r = _projection(rng, x.shape)
    return rel_error(ops.relu_backward(x, r),
                     numeric_grad(lambda: float(np.sum(ops.relu(x) * r)), x))


def check_pool(rng) -> float:
    x = rng.standard_normal((2, 3, 4, 5))
    r = _projection(rng, (2, 3, 1, 1))
    return rel_error(ops.global_avg_pool_backward(x.shape, r),
                     numeric_grad(lambda: float(np.sum(ops.global_avg_pool(x) * r)), x))


def check_fc(rng, n=3, d=6, k=4) -> float:
    x = rng.standard_normal((n, d, 1, 1))
    w = rng.standard_normal((k, d))
    b = rng.standard_normal(k)
    r = _projection(rng, (n, k))

    def loss():
        return float(np.sum(ops.fully_connected(x, w, b) * r))

    gx, gw, gb = ops.fully_connected_backward(x, w, r)
    return max(rel_error(gx, numeric_grad(loss, x)), rel_error(gw, numeric_grad(loss, w)),
               rel_error(gb, numeric_grad(loss, b)))


def check_softmax_ce(rng, n=4, k=5) -> float:
    logits = rng.standard_normal((n, k)) * 2
    labels = rng.integers(0, k, n)
    _, grad = ops.softmax_cross_entropy(logits, labels)
    return rel_error(grad, numeric_grad(lambda: ops.softmax_cross_entropy(logits, labels)[0], logits))


TOY_BLOCKS = {
    "resnet_bottleneck": BlockSpec("resnet_bottleneck", 3, 4, stride=2, mid_channels=2),
    "resnet_bottleneck_identity": BlockSpec("resnet_bottleneck", 4, 4, mid_channels=2),
    "psd": BlockSpec("psd", 3, 4, stride=2, mid_channels=2),
    "psd_identity": BlockSpec("psd", 4, 4, mid_channels=2),
    "mbv2_inverted": BlockSpec("mbv2_inverted", 2, 3, stride=2, multiplier=3),
    "mbv2_inverted_identity": BlockSpec("mbv2_inverted", 3, 3, multiplier=2),
    "dpd": BlockSpec("dpd", 2, 3, stride=2, multiplier=3),
    "dpd_identity": BlockSpec("dpd", 3, 3, multiplier=2),
}


def _with_loss(forward, backward, rng, x, params):
    """Max relative error over the input and every parameter array."""
    r = _projection(rng, forward(x).shape)

    def loss():
        return float(np.sum(forward(x) * r))

    loss()  # populate caches for backward
    gx, grads = backward(r)
    worst = rel_error(gx, numeric_grad(loss, x))
    for p in params:
        worst = max(worst, rel_error(grads[p.name], numeric_grad(loss, p.value)))
    return worst


def check_block(rng, spec: BlockSpec, hw=4, n=2) -> float:
    from .blocks import block_backward

    block = build_block(spec, rng, "toy")
    for layer in block.layers:  # non-trivial BN affine parameters
        if hasattr(layer, "gamma"):
            layer.gamma.value[...] = rng.uniform(0.5, 1.5, layer.gamma.size)
            layer.beta.value[...] = rng.standard_normal(layer.beta.size) * 0.5
    x = rng.standard_normal((n, spec.in_channels, hw, hw))
    return _with_loss(lambda v: block.forward(v, True), lambda g: block_backward(block, g),
                      rng, x, block.parameters())


def toy_network_spec() -> NetworkSpec:
    """Two-block network on 6x6 inputs used for the end-to-end check."""
    return NetworkSpec("toy", StemSpec(3), [StageSpec("dpd", 4, 2), StageSpec("psd", 4, 1, mid_channels=2)],
                       HeadSpec(pool=None), alpha=1.0, multiplier=2, num_classes=3, input_size=6)


def check_network(rng) -> float:
    from .arch import network_backward

    net = build_network(toy_network_spec(), rng)
    x = rng.standard_normal((2, 3, 6, 6))
    labels = np.array([0, 2])

    def loss():
        return ops.softmax_cross_entropy(net.forward(x, True), labels)[0]

    _, g = ops.softmax_cross_entropy(net.forward(x, True), labels)
    gx, grads = network_backward(net, g)
    worst = rel_error(gx, numeric_grad(loss, x))
    for p in net.parameters():
        worst = max(worst, rel_error(grads[p.name], numeric_grad(loss, p.value)))
    return worst


def run_suite(seed: int = 0) -> dict[str, float]:
    """Max relative error for each op / block kind, keyed by a short label."""
    rng = make_rng(seed)
    results = {
        "conv.standard": check_conv(rng, "standard"),
        "conv.standard.s2": check_conv(rng, "standard", stride=2),
        "conv.pointwise": check_conv(rng, "pointwise"),
        "conv.pointwise.s2": check_conv(rng, "pointwise", stride=2),
        "conv.depthwise": check_conv(rng, "depthwise"),
        "conv.depthwise.m3.s2": check_conv(rng, "depthwise", m=3, stride=2),
        "batch_norm": check_batch_norm(rng),
        "relu": check_relu(rng),
        "global_avg_pool": check_pool(rng),
        "fully_connected": check_fc(rng),
        "softmax_cross_entropy": check_softmax_ce(rng),
    }
    for label, spec in TOY_BLOCKS.items():
        results[f"block.{label}"] = check_block(rng, spec)
    results["network.toy"] = check_network(rng)
    return results


__all__ = ["run_suite", "numeric_grad", "rel_error", "TOY_BLOCKS", "BLOCK_KINDS"]
