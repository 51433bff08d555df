from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from dpdnet import ops
from dpdnet.analysis import (CountingPolicy, compare_networks, count_network, dwc_cost,
                             expansion_ratio, expansion_verdict, pwc_cost)
from dpdnet.arch import (BUILTIN_NAMES, HeadSpec, NetworkSpec, StageSpec, StemSpec, build_network,
                         builtin_spec)
from dpdnet.tensor import make_rng

DATA = Path(__file__).parent / "data"


def test_pwc_examples():
    assert pwc_cost(16, 64, 32, 32) == (1024, 1_048_576)
    assert pwc_cost(1, 1, 1, 1) == (1, 1)
    assert pwc_cost(96, 160, 8, 8) == (15_360, 983_040)


def test_dwc_examples():
    assert dwc_cost(16, 4, 3, 32, 32) == (576, 589_824)
    assert dwc_cost(1, 1, 1, 1, 1) == (1, 1)
    for m in (1, 2, 7):
        assert Fraction(pwc_cost(144, 144 * m, 8, 8)[0], dwc_cost(144, m, 3, 8, 8)[0]) == 16


def test_expansion_ratio_examples():
    assert expansion_ratio(9, 3) == 1 and expansion_verdict(9, 3) == "break-even"
    assert expansion_ratio(576, 3) == 64 and expansion_verdict(576, 3) == "DWC cheaper"
    assert expansion_ratio(8, 3) == Fraction(8, 9) and expansion_verdict(8, 3) == "PWC cheaper"


def test_cost_argument_errors():
    with pytest.raises(ValueError):
        pwc_cost(0, 1, 1, 1)
    with pytest.raises(ValueError):
        dwc_cost(1, 1, 0, 1, 1)
    with pytest.raises(ValueError):
        expansion_ratio(4, 0)


def test_expansion_identity_random_draws():
    rng = make_rng(5)
    for _ in range(1000):
        c, k, m, h, w = (int(v) for v in rng.integers(1, [513, 8, 9, 65, 65]))
        pp, pm = pwc_cost(c, m * c, h, w)
        dp, dm = dwc_cost(c, m, k, h, w)
        assert Fraction(pp, dp) == Fraction(pm, dm) == Fraction(c, k * k) == expansion_ratio(c, k)


def test_table_three_subtotal_by_hand():
    # conv weights of dpdnet_cifar at m=6 summed layer by layer from the architecture table
    m = 6
    stem = 3 * 3 * 3 * 32
    blocks = 0
    for k, out in [(32, 16), (16, 24), (24, 32), (32, 64), (64, 96), (96, 160)]:
        blocks += 9 * k * m + k * m * out + 9 * out
    fc = 160 * 10
    assert (stem, blocks, fc) == (864, 169_080, 1_600)
    report = count_network(builtin_spec("dpdnet_cifar", 1.0, 6))
    conv = sum(r.params for r in report.rows if ".conv" in r.layer)
    assert conv + 160 * 10 == 171_544


def test_table_five_anchor_cells():
    r1 = count_network(builtin_spec("dpdnet_cifar", 1.0, 1))
    r6 = count_network(builtin_spec("dpdnet_cifar", 1.0, 6))
    assert r1.params_m(2) == 0.04 and r1.macs_m(1) == 5.3
    assert abs(r6.params / 1e6 - 0.17) <= 0.01 + 0.05 * 0.17 and r6.macs_m(1) == 23.7


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_report_matches_allocated_weights(name):
    alpha = 0.5 if name != "dpdnet_imagenet" else 1.0
    spec = builtin_spec(name, alpha, 2 if name != "dpdnet_imagenet" else None)
    net = build_network(spec, make_rng(0))
    sizes = {p.name: p.size for p in net.parameters()}
    report = count_network(spec)
    for row in report.rows:
        allocated = sum(v for k, v in sizes.items() if k.startswith(row.layer + "."))
        assert row.params == allocated, row.layer
    assert report.params == sum(sizes.values())


def _loop_macs(spec):
    """Independent MAC oracle: walk every output element of every layer."""
    total = 0
    h = w = spec.input_size

    def charge(conv, h, w):
        ho, wo = conv.output_hw(h, w)
        taps = conv.kernel_size ** 2 * (1 if conv.kind == "depthwise" else conv.in_channels)
        n = 0
        for _ in range(conv.out_channels):
            for _ in range(ho):
                for _ in range(wo):
                    n += taps
        return n, ho, wo

    # projections see the block input, so charge them before walking the branch
    n, h, w = charge(spec.stem_conv(), h, w)
    total += n
    for b in spec.block_specs():
        proj = b.shortcut_conv()
        if proj is not None:
            total += charge(proj, h, w)[0]
        for conv in b.branch_convs():
            n, h, w = charge(conv, h, w)
            total += n
    if spec.head_conv() is not None:
        n, h, w = charge(spec.head_conv(), h, w)
        total += n
    return total + spec.features * spec.num_classes


TOY_SPECS = [
    builtin_spec("dpdnet_cifar", 0.25, 2),
    builtin_spec("mbv2_20_cifar", 0.25, 3),
    builtin_spec("resnet50_cifar", 0.25),
    builtin_spec("psdnet50_cifar", 0.25),
    NetworkSpec("toy_dpd", StemSpec(4, stride=2), [StageSpec("dpd", 6, 2, 2), StageSpec("dpd", 5, 1)],
                HeadSpec(pool=None, conv_channels=12), multiplier=3, num_classes=4, input_size=12),
    NetworkSpec("toy_mixed", StemSpec(4), [StageSpec("psd", 8, 2, mid_channels=4),
                                           StageSpec("mbv2_inverted", 6, 2, 2)],
                HeadSpec(pool=None), multiplier=2, num_classes=3, input_size=9),
]


@pytest.mark.parametrize("spec", TOY_SPECS, ids=lambda s: s.name)
def test_macs_equal_instrumented_forward(spec):
    net = build_network(spec, make_rng(0))
    x = make_rng(1).standard_normal((1, 3, spec.input_size, spec.input_size))
    with ops.count_multiplies() as counter:
        net.forward(x)
    report = count_network(spec)
    assert report.macs == counter.count
    assert _loop_macs(spec) == counter.count


def test_monotone_in_alpha_and_m():
    grid = [[count_network(builtin_spec("dpdnet_cifar", a, m)).totals for m in range(1, 7)]
            for a in (1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0)]
    arr = np.array(grid)
    assert (np.diff(arr, axis=0) >= 0).all() and (np.diff(arr, axis=1) >= 0).all()


def test_compare_psd_vs_resnet():
    psd = count_network(builtin_spec("psdnet50_cifar", 2.0))
    res = count_network(builtin_spec("resnet50_cifar", 2.0))
    table = compare_networks([psd, res])
    p, m = table.ratios()[(0, 1)]
    assert p < 1 and m < 1
    assert abs(float(m) - 208 / 316) < 0.2  # published 0.66, counted 0.82 (see README)


def test_compare_single_report_has_no_ratio_columns():
    table = compare_networks([count_network(builtin_spec("dpdnet_cifar"))])
    header, row = table.to_csv().splitlines()
    assert header == "network,params,macs" and row.count(",") == 2


def test_compare_dpd_vs_mbv2():
    dpd = count_network(builtin_spec("dpdnet_cifar", 1.0, 6))
    mbv2 = count_network(builtin_spec("mbv2_20_cifar", 1.0, 6))
    p, _ = compare_networks([dpd, mbv2]).ratios()[(0, 1)]
    assert abs(float(p) - 0.17 / 0.27) < 0.03


def test_policy_variants():
    spec = builtin_spec("dpdnet_cifar", 1.0, 1)
    base = count_network(spec)
    with_bias = count_network(spec, policy=CountingPolicy(conv_bias=True))
    n_convs = sum(1 for r in base.rows if ".conv" in r.layer)
    assert with_bias.params > base.params
    assert count_network(spec, policy=CountingPolicy(ops_per_mac=2)).macs == 2 * base.macs
    running = count_network(spec, policy=CountingPolicy(bn_running_stats=True)).params
    assert 0.0379e6 - 1e3 < running < 0.0379e6 + 1e3
    assert n_convs == 19


def test_csv_format_is_stable():
    csv = count_network(builtin_spec("dpdnet_cifar", 1.0, 6)).to_csv()
    assert csv == (DATA / "dpdnet_cifar_m6.csv").read_text(encoding="utf-8")
    assert "\r" not in csv and csv.endswith("\n")
    assert csv.splitlines()[0] == "layer,out_shape,params,macs"
    assert csv.splitlines()[-1] == "total,,176354,23692864"


def test_count_is_fast():
    import time

    t0 = time.perf_counter()
    for name in ("resnet50_cifar", "psdnet50_cifar"):
        count_network(builtin_spec(name, 2.0))
    assert time.perf_counter() - t0 < 1.0
