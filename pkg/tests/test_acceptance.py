"""Acceptance criteria, one test each.

Every test appends a ``CRITERION n PASS|FAIL ...`` line to ``RESULTS``;
``conftest.py`` prints them at the end of the session, and running this
file directly prints them too.
"""
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from dpdnet import ops
from dpdnet.analysis import count_network, dwc_cost, pwc_cost
from dpdnet.arch import build_network, builtin_spec
from dpdnet.data import synth_dataset
from dpdnet.gradcheck import TOLERANCE, run_suite
from dpdnet.ops import ConvParams
from dpdnet.tables import verify_tables
from dpdnet.tensor import make_rng
from dpdnet.train import TrainConfig, train

RESULTS: list[str] = []

# recorded pilot configuration for the toy training run
TOY_SEED = 0
TOY_STEPS = 200
TOY_LR = 0.05
TOY_BATCH = 32


def report(number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number:>2} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _table(table):
    t0 = time.perf_counter()
    checks = verify_tables(tables=(table,))
    return checks, time.perf_counter() - t0


def _failures(checks):
    return [c for c in checks if not c.passed]


def test_criterion_1_table4_counts():
    checks, secs = _table(4)
    bad = _failures(checks)
    detail = ", ".join(f"{c.network} {c.column} {c.computed:.3g} vs {c.expected}" for c in checks)
    report(1, not bad and secs < 1.0 and len(checks) == 4, f"{detail} (+-10%, {secs:.2f}s)")


def test_criterion_2_table5():
    checks, secs = _table(5)
    bad = _failures(checks)
    r1 = count_network(builtin_spec("dpdnet_cifar", 1.0, 1))
    r6 = count_network(builtin_spec("dpdnet_cifar", 1.0, 6))
    anchors = (f"{r1.params / 1e6:.2f}", f"{r1.macs / 1e6:.1f}") == ("0.04", "5.3") and \
        abs(r6.params / 1e6 - 0.17) <= 0.01 + 0.05 * 0.17 and f"{r6.macs / 1e6:.1f}" == "23.7"
    report(2, not bad and anchors and len(checks) == 24 and secs < 1.0,
           f"{len(checks) - len(bad)}/{len(checks)} cells; m=1 {r1.params / 1e6:.4f}M/{r1.macs / 1e6:.2f}M, "
           f"m=6 {r6.params / 1e6:.4f}M/{r6.macs / 1e6:.2f}M ({secs:.2f}s)")


def test_criterion_3_table6():
    checks, _ = _table(6)
    bad = _failures(checks)
    r = count_network(builtin_spec("dpdnet_cifar", 4.0, 5))
    anchor = f"{r.params / 1e6:.2f}" == "2.07" and round(r.macs / 1e6) == 222
    report(3, not bad and anchor and len(checks) == 28,
           f"{len(checks) - len(bad)}/{len(checks)} cells; alpha=4 {r.params / 1e6:.3f}M/{r.macs / 1e6:.1f}M")


def test_criterion_4_param_ratio():
    ratios = []
    for m in range(2, 7):
        dpd = count_network(builtin_spec("dpdnet_cifar", 1.0, m)).params
        mbv2 = count_network(builtin_spec("mbv2_20_cifar", 1.0, m)).params
        ratios.append(dpd / mbv2)
    ok = all(0.55 <= r <= 0.70 for r in ratios)
    report(4, ok, "DPDNet/MobileNetV2 params m=2..6: " + " ".join(f"{r:.3f}" for r in ratios))


def test_criterion_5_expansion_identity():
    rng = make_rng(2024)
    bad = 0
    for _ in range(1000):
        c, k, m, h, w = (int(v) for v in rng.integers(1, [1025, 8, 9, 129, 129]))
        pp, pm = pwc_cost(c, m * c, h, w)
        dp, dm = dwc_cost(c, m, k, h, w)
        bad += not (Fraction(pp, dp) == Fraction(pm, dm) == Fraction(c, k * k))
    report(5, bad == 0, f"1000 random draws, {bad} mismatches")


def test_criterion_6_separable_equivalence():
    rng = make_rng(6)
    worst, draws = 0.0, 0
    for c in range(1, 5):
        for out in range(1, 5):
            for _ in range(8):
                k = rng.standard_normal((c, 1, 3, 3))
                p = rng.standard_normal((out, c, 1, 1))
                x = rng.standard_normal((2, c, 4, 4))
                sep = ops.conv2d_forward(ops.conv2d_forward(x, ConvParams("depthwise", c, weight=k)),
                                         ConvParams("pointwise", c, out, weight=p))
                std = ops.conv2d_forward(x, ConvParams("standard", c, out, weight=p * k[:, 0][None]))
                worst = max(worst, float(np.max(np.abs(sep - std))))
                draws += 1
    report(6, worst <= 1e-12 and draws >= 100, f"{draws} draws, max abs diff {worst:.2e}")


def test_criterion_7_gradients():
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    secs = time.perf_counter() - t0
    worst_label = max(results, key=results.get)
    kinds = {k.split(".")[1] for k in results if k.startswith("block.")}
    covers = {"resnet_bottleneck", "psd", "mbv2_inverted", "dpd"} <= {k.replace("_identity", "") for k in kinds}
    ok = results[worst_label] <= TOLERANCE and secs < 60 and covers
    report(7, ok, f"{len(results)} checks, worst {results[worst_label]:.2e} ({worst_label}), {secs:.1f}s")


def test_criterion_8_instrumented_macs():
    specs = [builtin_spec("dpdnet_cifar", 0.25, 2), builtin_spec("mbv2_20_cifar", 0.25, 3),
             builtin_spec("resnet50_cifar", 0.25), builtin_spec("psdnet50_cifar", 0.25),
             builtin_spec("dpdnet_cifar_narrow", 1.0, 4)]
    mismatches = []
    for spec in specs:
        net = build_network(spec, make_rng(0))
        with ops.count_multiplies() as counter:
            net.forward(np.zeros((1, 3, 32, 32)))
        if counter.count != count_network(spec).macs:
            mismatches.append(spec.name)
    report(8, not mismatches, f"{len(specs)} specs, mismatches: {mismatches or 'none'}")


@pytest.mark.slow
def test_criterion_9_toy_training():
    ops.set_num_threads(1)
    spec = builtin_spec("dpdnet_cifar_narrow", 1.0, 1)
    net = build_network(spec, make_rng(TOY_SEED))
    data = synth_dataset(make_rng(TOY_SEED), 10, 50, 32)
    config = TrainConfig(base_lr=TOY_LR, lr_decay_epochs=[], batch_size=TOY_BATCH, seed=TOY_SEED,
                         augment=False, max_steps=TOY_STEPS)
    t0 = time.perf_counter()
    log = train(net, data, config)
    secs = time.perf_counter() - t0
    acc = log.final.train_acc
    ok = acc >= 0.9 and log.final.step == TOY_STEPS and secs < 300 and math.isfinite(log.final.loss)
    report(9, ok, f"train_acc {acc:.3f} after {log.final.step} steps (seed {TOY_SEED}), {secs:.0f}s")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
