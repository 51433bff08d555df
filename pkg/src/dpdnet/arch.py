"""Network descriptions, the built-in architectures and executable networks.

A :class:`NetworkSpec` stores *base* channel widths together with the width
multiplier ``alpha`` and the channel multiplier ``m``; :meth:`NetworkSpec.block_specs`
resolves them into concrete :class:`~dpdnet.blocks.BlockSpec` objects.

Width scaling uses round-half-up of ``alpha * c`` with a floor of one
channel. It applies to every block's output and mid widths. The stem keeps
its base width unless ``scale_stem`` is set: with the stem fixed, the
counted networks line up with the published per-alpha parameter and MAC
figures, while a scaled stem overshoots the MACs by up to 17% at alpha=4.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import ops
from .blocks import BLOCK_KINDS, Block, BlockSpec
from .errors import ParseError, ShapeError, SpecError
from .layers import BatchNorm, Conv, GlobalAvgPool, Linear, ReLU, run_backward, run_forward
from .ops import ConvParams

ALPHA_MAX = 8.0
TABLE_ALPHAS = (1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0)


def scale_width(alpha: float, channels: int) -> int:
    """Round-half-up of ``alpha * channels``, at least 1."""
    if channels < 1:
        raise SpecError(f"channel count must be positive, got {channels}")
    value = Fraction(str(alpha)) * channels
    return max(1, math.floor(value + Fraction(1, 2)))


@dataclass(frozen=True)
class StemSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel < 1:
            raise SpecError("stem kernel and width must be positive")
        if self.stride not in (1, 2):
            raise SpecError(f"stem stride must be 1 or 2, got {self.stride}")


@dataclass(frozen=True)
class StageSpec:
    """``repeat`` blocks of one kind; only the first may downsample."""

    kind: str
    out_channels: int
    stride: int = 1
    repeat: int = 1
    mid_channels: int | None = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise SpecError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise SpecError(f"stride must be 1 or 2, got {self.stride}")
        if self.repeat < 1:
            raise SpecError(f"repeat count must be >= 1, got {self.repeat}")
        if self.out_channels < 1:
            raise SpecError("out_channels must be positive")
        needs_mid = self.kind in ("resnet_bottleneck", "psd")
        if needs_mid and (self.mid_channels is None or self.mid_channels < 1):
            raise SpecError(f"{self.kind} stage needs a positive mid_channels")
        if not needs_mid and self.mid_channels is not None:
            raise SpecError(f"{self.kind} stage takes no mid_channels (width is m*k)")


@dataclass(frozen=True)
class HeadSpec:
    """Classifier head: optional 1x1 conv, average pool, FC.

    ``pool`` is the expected pooling window (the final feature map must be
    exactly that size); ``None`` pools whatever spatial size arrives.
    """

    pool: int | None = None
    conv_channels: int | None = None

    def __post_init__(self):
        if self.pool is not None and self.pool < 1:
            raise SpecError("pool window must be positive")
        if self.conv_channels is not None and self.conv_channels < 1:
            raise SpecError("head conv width must be positive")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    stem: StemSpec
    stages: tuple[StageSpec, ...]
    head: HeadSpec = field(default_factory=HeadSpec)
    alpha: float = 1.0
    multiplier: int = 1
    num_classes: int = 10
    input_size: int = 32
    scale_stem: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise SpecError("a network needs at least one stage")
        if not 0 < self.alpha <= ALPHA_MAX:
            raise SpecError(f"alpha must lie in (0, {ALPHA_MAX:g}], got {self.alpha}")
        if int(self.multiplier) != self.multiplier or self.multiplier < 1:
            raise SpecError(f"m must be a positive integer, got {self.multiplier}")
        if self.num_classes < 1 or self.input_size < 1:
            raise SpecError("num_classes and input_size must be positive")

    @property
    def stem_channels(self) -> int:
        c = self.stem.out_channels
        return scale_width(self.alpha, c) if self.scale_stem else c

    def stem_conv(self) -> ConvParams:
        return ConvParams("standard", 3, self.stem_channels,
                          kernel_size=self.stem.kernel, stride=self.stem.stride)

    def block_specs(self) -> list[BlockSpec]:
        specs = []
        k = self.stem_channels
        for stage in self.stages:
            out = scale_width(self.alpha, stage.out_channels)
            mid = None
            if stage.mid_channels is not None:
                mid = scale_width(self.alpha, stage.mid_channels)
            m = self.multiplier if stage.kind in ("dpd", "mbv2_inverted") else None
            for i in range(stage.repeat):
                specs.append(BlockSpec(stage.kind, k, out, stage.stride if i == 0 else 1,
                                       multiplier=m, mid_channels=mid))
                k = out
        return specs

    def head_conv(self) -> ConvParams | None:
        if self.head.conv_channels is None:
            return None
        return ConvParams("pointwise", self.block_specs()[-1].out_channels,
                          self.head.conv_channels)

    @property
    def features(self) -> int:
        if self.head.conv_channels is not None:
            return self.head.conv_channels
        return self.block_specs()[-1].out_channels

    def widths(self) -> list[int]:
        """Output width of every block, in order."""
        return [b.out_channels for b in self.block_specs()]

    def weight_layer_count(self) -> int:
        """Stem + 3 per block + optional head conv + FC (projections excluded)."""
        return 1 + 3 * len(self.block_specs()) + (self.head.conv_channels is not None) + 1


# --------------------------------------------------------------------------
# built-in architectures
# --------------------------------------------------------------------------

_CIFAR_WIDTHS = [(16, 1), (24, 1), (32, 2), (64, 1), (96, 2), (160, 1)]
_IMAGENET_STAGES = [(16, 1, 1), (24, 2, 2), (32, 2, 3), (64, 2, 4), (96, 1, 3), (160, 2, 3), (320, 1, 1)]
_RESNET_STAGES = [(16, 64, 1, 5), (32, 128, 2, 6), (64, 256, 2, 5)]

_NARROW_WIDTHS = [8, 8, 16, 16, 24, 24]

BUILTIN_NAMES = ("resnet50_cifar", "psdnet50_cifar", "dpdnet_cifar", "mbv2_20_cifar", "dpdnet_imagenet",
                 "dpdnet_cifar_narrow")


def builtin_spec(name: str, alpha: float = 1.0, m: int | None = None,
                 num_classes: int | None = None, scale_stem: bool = False) -> NetworkSpec:
    """Return one of the built-in architectures.

    ``m`` defaults to 1 (6 for ``dpdnet_imagenet``) and is ignored by the
    ResNet-style networks. ``num_classes`` defaults to 10 (1000 for ImageNet).
    """
    common = dict(alpha=alpha, scale_stem=scale_stem)
    if name in ("resnet50_cifar", "psdnet50_cifar"):
        kind = "resnet_bottleneck" if name == "resnet50_cifar" else "psd"
        stages = [StageSpec(kind, out, s, n, mid_channels=mid) for mid, out, s, n in _RESNET_STAGES]
        return NetworkSpec(name, StemSpec(16), stages, HeadSpec(pool=8),
                           multiplier=m or 1, num_classes=num_classes or 10, **common)
    if name in ("dpdnet_cifar", "mbv2_20_cifar"):
        kind = "dpd" if name == "dpdnet_cifar" else "mbv2_inverted"
        stages = [StageSpec(kind, out, s) for out, s in _CIFAR_WIDTHS]
        return NetworkSpec(name, StemSpec(32), stages, HeadSpec(pool=8),
                           multiplier=m or 1, num_classes=num_classes or 10, **common)
    if name == "dpdnet_cifar_narrow":
        # dpdnet_cifar with stem 8 and thin blocks; used for quick training runs
        stages = [StageSpec("dpd", out, s) for out, (_, s) in zip(_NARROW_WIDTHS, _CIFAR_WIDTHS)]
        return NetworkSpec(name, StemSpec(8), stages, HeadSpec(pool=8),
                           multiplier=m or 1, num_classes=num_classes or 10, **common)
    if name == "dpdnet_imagenet":
        stages = [StageSpec("dpd", out, s, n) for out, s, n in _IMAGENET_STAGES]
        return NetworkSpec(name, StemSpec(32, stride=2), stages, HeadSpec(pool=7, conv_channels=1280),
                           multiplier=m or 6, num_classes=num_classes or 1000, input_size=224, **common)
    raise KeyError(f"unknown builtin network {name!r}; choose from {', '.join(BUILTIN_NAMES)}")


# --------------------------------------------------------------------------
# executable network
# --------------------------------------------------------------------------


class Network:
    """Stem -> blocks -> [head conv] -> average pool -> FC, producing logits."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        stem = spec.stem_conv()
        self.stem = [Conv("stem.conv", stem, rng), BatchNorm("stem.bn", stem.out_channels),
                     ReLU("stem.relu")]
        self.blocks = [Block(bs, rng, f"block{i}") for i, bs in enumerate(spec.block_specs(), 1)]
        self.head: list = []
        head = spec.head_conv()
        if head is not None:
            self.head = [Conv("head.conv", head, rng), BatchNorm("head.bn", head.out_channels),
                         ReLU("head.relu")]
        self.pool = GlobalAvgPool("pool")
        self.fc = Linear("fc", spec.features, spec.num_classes, rng)

    def modules(self):
        yield from self.stem
        yield from self.blocks
        yield from self.head
        yield self.pool
        yield self.fc

    def parameters(self):
        return [p for mod in self.modules() for p in mod.parameters()]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for mod in self.modules():
            out.update(mod.buffers())
        return out

    def convs(self) -> list[Conv]:
        out = [self.stem[0]]
        for b in self.blocks:
            out.extend(b.convs())
        return out + [layer for layer in self.head if isinstance(layer, Conv)]

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def features(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """Feature map entering the pooling layer."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected an (N, 3, H, W) batch, got shape {x.shape}")
        x = run_forward(self.stem, x, training)
        for block in self.blocks:
            x = block.forward(x, training)
        x = run_forward(self.head, x, training)
        window = self.spec.head.pool
        if window is not None and x.shape[2:] != (window, window):
            raise ShapeError(
                f"final feature map is {x.shape[2]}x{x.shape[3]} but the pooling window is "
                f"{window}x{window}; input size {self.spec.input_size} expected"
            )
        return x

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = self.features(x, training)
        return self.fc.forward(self.pool.forward(x, training), training)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        g = self.pool.backward(self.fc.backward(grad_logits))
        g = run_backward(self.head, g)
        for block in reversed(self.blocks):
            g = block.backward(g)
        return run_backward(self.stem, g)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return ops.softmax(self.forward(x, training=False))


def build_network(spec: NetworkSpec, rng: np.random.Generator) -> Network:
    return Network(spec, rng)


def network_forward(net: Network, x: np.ndarray, training: bool = False) -> np.ndarray:
    return net.forward(x, training)


def network_backward(net: Network, grad_logits: np.ndarray):
    """Returns ``(grad_x, {param name: grad})`` for this call alone."""
    net.zero_grad()
    gx = net.backward(grad_logits)
    return gx, {p.name: p.grad.copy() for p in net.parameters()}


# --------------------------------------------------------------------------
# config documents
# --------------------------------------------------------------------------

_TOP_KEYS = {"name", "alpha", "m", "num_classes", "input_size", "scale_stem"}
_REQUIRED_TOP = ("alpha", "m", "num_classes")
_STEM_KEYS = {"kernel": "kernel", "out_channels": "out_channels", "stride": "stride"}
_STAGE_KEYS = {"kind", "out_channels", "mid_channels", "stride", "repeat"}
_HEAD_KEYS = {"pool", "conv_channels"}


def emit_spec(spec: NetworkSpec) -> str:
    """Serialise ``spec`` in the config format (byte-stable)."""
    lines = [
        "# dpdnet network spec",
        f"name = {spec.name}",
        f"alpha = {float(spec.alpha)!r}",
        f"m = {spec.multiplier}",
        f"num_classes = {spec.num_classes}",
        f"input_size = {spec.input_size}",
        f"scale_stem = {'true' if spec.scale_stem else 'false'}",
        "",
        "[stem]",
        f"kernel = {spec.stem.kernel}",
        f"out_channels = {spec.stem.out_channels}",
        f"stride = {spec.stem.stride}",
    ]
    for i, st in enumerate(spec.stages, 1):
        lines += ["", f"[stage {i}]", f"kind = {st.kind}", f"out_channels = {st.out_channels}"]
        if st.mid_channels is not None:
            lines.append(f"mid_channels = {st.mid_channels}")
        lines += [f"stride = {st.stride}", f"repeat = {st.repeat}"]
    lines += [
        "",
        "[head]",
        f"pool = {'global' if spec.head.pool is None else spec.head.pool}",
        f"conv_channels = {'none' if spec.head.conv_channels is None else spec.head.conv_channels}",
    ]
    return "\n".join(lines) + "\n"


def _parse_int(raw, line, key, allow=()):
    if raw in allow:
        return None
    try:
        return int(raw, 10)
    except ValueError:
        raise ParseError(f"expected an integer, got {raw!r}", line, key) from None


def _parse_bool(raw, line, key):
    if raw.lower() in ("true", "yes", "1"):
        return True
    if raw.lower() in ("false", "no", "0"):
        return False
    raise ParseError(f"expected true/false, got {raw!r}", line, key)


def _tokenize(text):
    """Yield (section, (line_no, key, value)) with section None at top level."""
    section = None
    entries: dict = {None: []}
    order = []
    for no, raw in enumerate(text.splitlines(), 1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ParseError(f"malformed section header {stripped!r}", no)
            header = stripped[1:-1].split()
            if header == ["stem"] or header == ["head"]:
                section = header[0]
            elif len(header) == 2 and header[0] == "stage":
                idx = _parse_int(header[1], no, "stage")
                if idx < 1:
                    raise ParseError("stage numbers start at 1", no)
                section = ("stage", idx)
            else:
                raise ParseError(f"unknown section [{' '.join(header)}]", no)
            if section in entries:
                raise ParseError(f"duplicate section {stripped}", no)
            entries[section] = []
            order.append((section, no))
            continue
        if "=" not in stripped:
            raise ParseError(f"expected 'key = value', got {stripped!r}", no)
        key, value = (s.strip() for s in stripped.split("=", 1))
        if any(k == key for _, k, _ in entries[section]):
            raise ParseError("duplicate key", no, key)
        entries[section].append((no, key, value))
    return entries, order


def parse_spec(text: str) -> NetworkSpec:
    """Parse a config document into a :class:`NetworkSpec`.

    A document naming a builtin network starts from that builtin and
    overrides only the keys it supplies; any other name needs explicit
    ``[stem]``, ``[stage N]`` and ``[head]`` sections.
    """
    entries, order = _tokenize(text)
    top = {}
    for no, key, value in entries[None]:
        if key not in _TOP_KEYS:
            raise ParseError("unknown top-level key", no, key)
        top[key] = (no, value)
    for key in _REQUIRED_TOP:
        if key not in top:
            raise ParseError("missing required key", None, key)

    no, raw = top["alpha"]
    try:
        alpha = float(raw)
    except ValueError:
        raise ParseError(f"expected a number, got {raw!r}", no, "alpha") from None
    if not 0 < alpha <= ALPHA_MAX:
        raise ParseError(f"alpha must lie in (0, {ALPHA_MAX:g}]", no, "alpha")
    m = _parse_int(top["m"][1], top["m"][0], "m")
    if m < 1:
        raise ParseError("m must be a positive integer", top["m"][0], "m")
    num_classes = _parse_int(top["num_classes"][1], top["num_classes"][0], "num_classes")
    if num_classes < 1:
        raise ParseError("num_classes must be positive", top["num_classes"][0], "num_classes")
    name = top.get("name", (None, "custom"))[1]
    scale_stem = False
    if "scale_stem" in top:
        scale_stem = _parse_bool(top["scale_stem"][1], top["scale_stem"][0], "scale_stem")

    if name in BUILTIN_NAMES:
        base = builtin_spec(name, alpha, m, num_classes, scale_stem)
    else:
        missing = [s for s in ("stem", "head") if s not in entries]
        if missing or not any(isinstance(s, tuple) for s in entries):
            raise ParseError(
                f"network {name!r} is not builtin; [stem], [stage N] and [head] sections are required"
            )
        base = None

    # stem
    stem = base.stem if base else None
    if "stem" in entries:
        fields = dataclasses.asdict(stem) if stem else {"kernel": 3, "stride": 1}
        for no, key, value in entries["stem"]:
            if key not in _STEM_KEYS:
                raise ParseError("unknown key in [stem]", no, key)
            fields[key] = _parse_int(value, no, key)
        stem = _construct(StemSpec, fields, "stem", order)

    # stages
    stages = list(base.stages) if base else []
    stage_idx = sorted(s[1] for s in entries if isinstance(s, tuple))
    for idx in stage_idx:
        if idx > len(stages) + 1:
            raise ParseError(f"stage {idx} given but stage {len(stages) + 1} is missing",
                             _section_line(order, ("stage", idx)))
        if idx <= len(stages):
            fields = dataclasses.asdict(stages[idx - 1])
        else:
            fields = {"stride": 1, "repeat": 1, "mid_channels": None}
        for no, key, value in entries[("stage", idx)]:
            if key not in _STAGE_KEYS:
                raise ParseError(f"unknown key in [stage {idx}]", no, key)
            if key == "kind":
                fields[key] = value
            else:
                fields[key] = _parse_int(value, no, key, allow=("none",) if key == "mid_channels" else ())
        for key in ("kind", "out_channels"):
            if key not in fields:
                raise ParseError(f"stage {idx} is missing required key", _section_line(order, ("stage", idx)), key)
        stage = _construct(StageSpec, fields, f"stage {idx}", order, ("stage", idx))
        if idx <= len(stages):
            stages[idx - 1] = stage
        else:
            stages.append(stage)

    # head
    head = base.head if base else HeadSpec()
    if "head" in entries:
        fields = dataclasses.asdict(head)
        for no, key, value in entries["head"]:
            if key not in _HEAD_KEYS:
                raise ParseError("unknown key in [head]", no, key)
            allow = ("global",) if key == "pool" else ("none",)
            fields[key] = _parse_int(value, no, key, allow=allow)
        head = _construct(HeadSpec, fields, "head", order)

    input_size = base.input_size if base else 32
    if "input_size" in top:
        input_size = _parse_int(top["input_size"][1], top["input_size"][0], "input_size")
    try:
        return NetworkSpec(name, stem, tuple(stages), head, alpha, m, num_classes, input_size, scale_stem)
    except SpecError as exc:
        raise ParseError(str(exc)) from None


def _section_line(order, section):
    for sec, no in order:
        if sec == section:
            return no
    return None


def _construct(cls, fields, label, order, section=None):
    try:
        return cls(**fields)
    except SpecError as exc:
        line = _section_line(order, section if section is not None else label)
        raise ParseError(f"{label}: {exc}", line) from None
