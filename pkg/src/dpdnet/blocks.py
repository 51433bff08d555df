"""Bottleneck blocks: ResNet, PSD, MobileNetV2 inverted residual and DPD.

Every block has exactly three convolutions on its main branch:

==================  =============================  ==========================  ======================
kind                conv 1                         conv 2                      conv 3
==================  =============================  ==========================  ======================
resnet_bottleneck   1x1, k -> mid                  3x3, mid -> mid, stride s   1x1, mid -> k'
psd                 1x1, k -> mid                  3x3, mid -> mid, stride s   3x3 dw, mid -> k'
mbv2_inverted       1x1, k -> m*k                  3x3 dw, m*k, stride s       1x1, m*k -> k' (linear)
dpd                 3x3 dw x m, k -> m*k, stride s 1x1, m*k -> k'              3x3 dw, k' -> k'
==================  =============================  ==========================  ======================

Each convolution is followed by batch norm. ResNet and PSD add the shortcut
before their last ReLU and project it (1x1 conv + BN, stride s) whenever
the shape changes. MobileNetV2 and DPD only get an identity shortcut when
``s == 1`` and ``k == k'``; for DPD it is added after the final ReLU.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SpecError
from .layers import BatchNorm, Conv, Layer, ReLU, run_backward, run_forward
from .ops import ConvParams

BLOCK_KINDS = ("resnet_bottleneck", "psd", "mbv2_inverted", "dpd")


@dataclass(frozen=True)
class BlockSpec:
    """Declarative description of one bottleneck block.

    ``multiplier`` is the channel multiplier for ``dpd`` / ``mbv2_inverted``.
    For ``resnet_bottleneck`` / ``psd`` it is the final-layer expansion ratio
    ``out / mid`` and is derived when omitted.
    """

    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    multiplier: int | None = None
    mid_channels: int | None = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise SpecError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise SpecError("block channel counts must be positive")
        if self.stride not in (1, 2):
            raise SpecError(f"block stride must be 1 or 2, got {self.stride}")
        if self.kind in ("resnet_bottleneck", "psd"):
            if self.mid_channels is None or self.mid_channels < 1:
                raise SpecError(f"{self.kind} block needs a positive mid_channels")
            if self.kind == "psd" and self.out_channels % self.mid_channels:
                raise SpecError(
                    f"psd block: out_channels {self.out_channels} is not a multiple "
                    f"of mid_channels {self.mid_channels}"
                )
            if self.multiplier is None:
                object.__setattr__(
                    self, "multiplier", max(1, self.out_channels // self.mid_channels)
                )
        else:
            if self.multiplier is None:
                object.__setattr__(self, "multiplier", 1)
            if self.multiplier < 1:
                raise SpecError("channel multiplier must be a positive integer")
            if self.mid_channels is not None and self.mid_channels != self.expanded:
                raise SpecError(f"{self.kind} mid width is m*k = {self.expanded}")

    @property
    def expanded(self) -> int:
        """Width after the expansion layer (``m * k`` for inverted blocks)."""
        if self.kind in ("mbv2_inverted", "dpd"):
            return self.multiplier * self.in_channels
        return self.mid_channels

    @property
    def has_identity(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels

    @property
    def has_projection(self) -> bool:
        return self.kind in ("resnet_bottleneck", "psd") and not self.has_identity

    def branch_convs(self) -> list[ConvParams]:
        """Unweighted ConvParams of the three main-branch convolutions."""
        k, out, s = self.in_channels, self.out_channels, self.stride
        if self.kind == "resnet_bottleneck":
            mid = self.mid_channels
            return [
                ConvParams("pointwise", k, mid),
                ConvParams("standard", mid, mid, stride=s),
                ConvParams("pointwise", mid, out),
            ]
        if self.kind == "psd":
            mid = self.mid_channels
            return [
                ConvParams("pointwise", k, mid),
                ConvParams("standard", mid, mid, stride=s),
                ConvParams("depthwise", mid, multiplier=out // mid),
            ]
        mk = self.expanded
        if self.kind == "mbv2_inverted":
            return [
                ConvParams("pointwise", k, mk),
                ConvParams("depthwise", mk, stride=s),
                ConvParams("pointwise", mk, out),
            ]
        return [
            ConvParams("depthwise", k, multiplier=self.multiplier, stride=s),
            ConvParams("pointwise", mk, out),
            ConvParams("depthwise", out),
        ]

    def shortcut_conv(self) -> ConvParams | None:
        if not self.has_projection:
            return None
        return ConvParams("pointwise", self.in_channels, self.out_channels, stride=self.stride)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        for conv in self.branch_convs():
            h, w = conv.output_hw(h, w)
        return h, w


class Block:
    """An executable block: main-branch layers plus a shortcut rule."""

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, name: str = "block"):
        self.spec = spec
        self.name = name
        self.branch: list[Layer] = []
        convs = spec.branch_convs()
        for i, params in enumerate(convs, start=1):
            self.branch.append(Conv(f"{name}.conv{i}", params, rng))
            self.branch.append(BatchNorm(f"{name}.bn{i}", params.out_channels))
            last = i == len(convs)
            if not last or spec.kind == "dpd":
                self.branch.append(ReLU(f"{name}.relu{i}"))

        # None: no shortcut; []: identity; otherwise projection layers.
        self.shortcut: list[Layer] | None = None
        proj = spec.shortcut_conv()
        if proj is not None:
            self.shortcut = [
                Conv(f"{name}.proj.conv", proj, rng),
                BatchNorm(f"{name}.proj.bn", proj.out_channels),
            ]
        elif spec.has_identity:
            self.shortcut = []

        self.post_relu = (
            ReLU(f"{name}.relu_out") if spec.kind in ("resnet_bottleneck", "psd") else None
        )

    @property
    def layers(self) -> list[Layer]:
        out = list(self.branch)
        if self.shortcut:
            out.extend(self.shortcut)
        return out

    def convs(self) -> list[Conv]:
        return [layer for layer in self.layers if isinstance(layer, Conv)]

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"{self.name}: expected {self.spec.in_channels} input channels, got shape {x.shape}"
            )
        y = run_forward(self.branch, x, training)
        if self.shortcut is not None:
            y = y + run_forward(self.shortcut, x, training)
        if self.post_relu is not None:
            y = self.post_relu.forward(y, training)
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self.post_relu is not None:
            grad = self.post_relu.backward(grad)
        gx = run_backward(self.branch, grad)
        if self.shortcut is not None:
            gx = gx + run_backward(self.shortcut, grad)
        return gx


def build_block(spec: BlockSpec, rng: np.random.Generator, name: str = "block") -> Block:
    return Block(spec, rng, name)


def block_forward(block: Block, x: np.ndarray, training: bool = False) -> np.ndarray:
    return block.forward(x, training)


def block_backward(block: Block, grad: np.ndarray):
    """Backpropagate ``grad``; returns ``(grad_x, {param name: grad})``.

    Parameter gradients are reset before the pass, so the dict holds the
    gradient of this call alone.
    """
    for p in block.parameters():
        p.grad[...] = 0.0
    gx = block.backward(grad)
    return gx, {p.name: p.grad.copy() for p in block.parameters()}
