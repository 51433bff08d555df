"""Analytic parameter and multiply-accumulate (MAC) counting.

Counting is symbolic: the network is traversed from its spec without
allocating any tensors. The default :class:`CountingPolicy` counts

* params: conv weights, BN gamma/beta, FC weights and bias;
* MACs: convolution and FC multiplies only (one MAC per multiply-add).

BN running statistics, activations, pooling and softmax are free. "FLOPs"
figures in the literature that follow this convention are MACs.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .arch import NetworkSpec
from .errors import ShapeError
from .ops import ConvParams


def pwc_cost(C: int, out: int, H: int, W: int) -> tuple[int, int]:
    """Pointwise conv C -> out on an H x W map: ``(C*out, H*W*C*out)``."""
    _positive(C=C, out=out, H=H, W=W)
    params = C * out
    return params, H * W * params


def dwc_cost(C: int, m: int, k: int, H_out: int, W_out: int) -> tuple[int, int]:
    """Depthwise k x k conv with multiplier m: ``(k*k*m*C, H*W*k*k*m*C)``."""
    _positive(C=C, m=m, k=k, H_out=H_out, W_out=W_out)
    params = k * k * m * C
    return params, H_out * W_out * params


def std_cost(C: int, out: int, k: int, H_out: int, W_out: int) -> tuple[int, int]:
    _positive(C=C, out=out, k=k, H_out=H_out, W_out=W_out)
    params = k * k * C * out
    return params, H_out * W_out * params


def expansion_ratio(C: int, k: int) -> Fraction:
    """Cost of expanding C channels with a 1x1 conv relative to a k x k depthwise conv.

    The same ratio, ``C / k**2``, holds for parameters and for MACs.
    """
    _positive(C=C, k=k)
    return Fraction(C, k * k)


def expansion_verdict(C: int, k: int) -> str:
    r = expansion_ratio(C, k)
    if r > 1:
        return "DWC cheaper"
    if r < 1:
        return "PWC cheaper"
    return "break-even"


def _positive(**kwargs):
    for name, value in kwargs.items():
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class CountingPolicy:
    conv_bias: bool = False
    bn_affine: bool = True
    bn_running_stats: bool = False
    fc_bias: bool = True
    ops_per_mac: int = 1

    def describe(self) -> str:
        return ";".join(f"{k}={v}" for k, v in asdict(self).items())


DEFAULT_POLICY = CountingPolicy()


@dataclass(frozen=True)
class CostRow:
    layer: str
    out_shape: tuple[int, int, int]
    params: int
    macs: int


@dataclass
class CostReport:
    name: str
    rows: list[CostRow]
    policy: CountingPolicy = DEFAULT_POLICY
    input_hw: tuple[int, int] = (32, 32)
    spec: NetworkSpec | None = field(default=None, repr=False)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def totals(self) -> tuple[int, int]:
        return self.params, self.macs

    def params_m(self, decimals: int = 2) -> float:
        return round(self.params / 1e6, decimals)

    def macs_m(self, decimals: int = 1) -> float:
        return round(self.macs / 1e6, decimals)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "out_shape", "params", "macs"])
        for r in self.rows:
            writer.writerow([r.layer, "x".join(map(str, r.out_shape)), r.params, r.macs])
        writer.writerow(["total", "", self.params, self.macs])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(r.layer) for r in self.rows + [CostRow("total", (0, 0, 0), 0, 0)])
        lines = [f"{self.name}  (input {self.input_hw[0]}x{self.input_hw[1]}, policy: {self.policy.describe()})",
                 f"{'layer':<{width}}  {'out_shape':>12}  {'params':>10}  {'macs':>13}"]
        for r in self.rows:
            shape = "x".join(map(str, r.out_shape))
            lines.append(f"{r.layer:<{width}}  {shape:>12}  {r.params:>10,}  {r.macs:>13,}")
        lines.append(f"{'total':<{width}}  {'':>12}  {self.params:>10,}  {self.macs:>13,}")
        lines.append(f"= {self.params / 1e6:.4f} M params, {self.macs / 1e6:.2f} M MACs")
        return "\n".join(lines)


def _conv_row(name, conv: ConvParams, h, w, policy):
    ho, wo = conv.output_hw(h, w)
    if conv.kind == "pointwise":
        params, macs = pwc_cost(conv.in_channels, conv.out_channels, ho, wo)
    elif conv.kind == "depthwise":
        params, macs = dwc_cost(conv.in_channels, conv.multiplier, conv.kernel_size, ho, wo)
    else:
        params, macs = std_cost(conv.in_channels, conv.out_channels, conv.kernel_size, ho, wo)
    if policy.conv_bias:
        params += conv.out_channels
    return CostRow(name, (conv.out_channels, ho, wo), params, macs * policy.ops_per_mac), ho, wo


def _bn_row(name, channels, shape, policy):
    params = 0
    if policy.bn_affine:
        params += 2 * channels
    if policy.bn_running_stats:
        params += 2 * channels
    return CostRow(name, shape, params, 0)


def count_network(spec: NetworkSpec, input_hw: tuple[int, int] | None = None,
                  policy: CountingPolicy = DEFAULT_POLICY) -> CostReport:
    """Per-layer parameter and MAC counts for ``spec`` at one input size.

    Row names match the parameter names of the built network, so every
    weight tensor maps onto exactly one row.
    """
    if input_hw is None:
        input_hw = (spec.input_size, spec.input_size)
    h, w = input_hw
    rows: list[CostRow] = []

    def conv_bn(prefix, conv_name, bn_name, conv):
        nonlocal h, w
        row, h, w = _conv_row(f"{prefix}.{conv_name}", conv, h, w, policy)
        rows.append(row)
        rows.append(_bn_row(f"{prefix}.{bn_name}", conv.out_channels, row.out_shape, policy))

    conv_bn("stem", "conv", "bn", spec.stem_conv())
    for i, bs in enumerate(spec.block_specs(), 1):
        h0, w0 = h, w
        for j, conv in enumerate(bs.branch_convs(), 1):
            conv_bn(f"block{i}", f"conv{j}", f"bn{j}", conv)
        proj = bs.shortcut_conv()
        if proj is not None:
            h1, w1 = h, w
            h, w = h0, w0
            conv_bn(f"block{i}", "proj.conv", "proj.bn", proj)
            if (h, w) != (h1, w1):
                raise ShapeError(f"block{i}: shortcut output {h}x{w} != branch output {h1}x{w1}")
    head = spec.head_conv()
    if head is not None:
        conv_bn("head", "conv", "bn", head)
    window = spec.head.pool
    if window is not None and (h, w) != (window, window):
        raise ShapeError(
            f"final feature map is {h}x{w} but the pooling window is {window}x{window}"
        )
    feats = spec.features
    fc_params = feats * spec.num_classes + (spec.num_classes if policy.fc_bias else 0)
    rows.append(CostRow("fc", (spec.num_classes, 1, 1), fc_params,
                        feats * spec.num_classes * policy.ops_per_mac))
    return CostReport(_report_name(spec), rows, policy, tuple(input_hw), spec)


def _report_name(spec: NetworkSpec) -> str:
    name = spec.name
    if spec.alpha != 1.0:
        name += f"@a{spec.alpha:g}"
    if any(st.kind in ("dpd", "mbv2_inverted") for st in spec.stages):
        name += f"@m{spec.multiplier}"
    return name


@dataclass
class Comparison:
    reports: list[CostReport]

    def ratios(self):
        """``{(i, j): (params_i / params_j, macs_i / macs_j)}`` for i != j."""
        out = {}
        for i, a in enumerate(self.reports):
            for j, b in enumerate(self.reports):
                if i != j:
                    out[(i, j)] = (Fraction(a.params, b.params), Fraction(a.macs, b.macs))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        names = [r.name for r in self.reports]
        header = ["network", "params", "macs"]
        for n in names:
            header += [f"params_vs_{n}", f"macs_vs_{n}"] if len(names) > 1 else []
        writer.writerow(header)
        for i, r in enumerate(self.reports):
            row = [r.name, r.params, r.macs]
            if len(names) > 1:
                for j, other in enumerate(self.reports):
                    if i == j:
                        row += ["1.000000", "1.000000"]
                    else:
                        row += [f"{r.params / other.params:.6f}", f"{r.macs / other.macs:.6f}"]
            writer.writerow(row)
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(r.name) for r in self.reports)
        lines = [f"{'network':<{width}}  {'params':>12}  {'MACs':>14}"]
        for r in self.reports:
            lines.append(f"{r.name:<{width}}  {r.params / 1e6:>10.3f} M  {r.macs / 1e6:>12.1f} M")
        for (i, j), (p, m) in self.ratios().items():
            if i < j:
                a, b = self.reports[i].name, self.reports[j].name
                lines.append(f"{a} / {b}: params {float(p):.3f}, MACs {float(m):.3f}")
        return "\n".join(lines)


def compare_networks(reports: list[CostReport]) -> Comparison:
    if not reports:
        raise ValueError("need at least one report to compare")
    return Comparison(list(reports))
