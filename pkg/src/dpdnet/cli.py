"""Command-line entry point: ``dpdnet <command> [options]``.

Exit codes: 0 success, 1 runtime failure (divergence, I/O), 2 usage or
spec error. ``DPDNET_THREADS`` sets the default for ``--threads``.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import ops
from .analysis import CountingPolicy, compare_networks, count_network
from .arch import BUILTIN_NAMES, builtin_spec, build_network, emit_spec, parse_spec
from .errors import DivergenceError, FormatError, SpecError
from .tensor import make_rng

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _add_spec_source(p, required=True):
    group = p.add_mutually_exclusive_group(required=required)
    group.add_argument("--builtin", choices=BUILTIN_NAMES, help="built-in architecture")
    group.add_argument("--spec", metavar="FILE", help="network config document")
    p.add_argument("--alpha", type=float, help="width multiplier")
    p.add_argument("--m", type=int, help="channel multiplier of DPD / MobileNetV2 blocks")
    p.add_argument("--classes", type=int, help="number of output classes")


def _load_spec(args):
    if args.builtin:
        alpha = 1.0 if args.alpha is None else args.alpha
        return builtin_spec(args.builtin, alpha, args.m, args.classes)
    path = Path(args.spec)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read spec file {path}: {exc.strerror or exc}") from None
    try:
        spec = parse_spec(text)
    except SpecError as exc:
        raise UsageError(f"{path}: {exc}") from None
    overrides = {}
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if args.m is not None:
        overrides["multiplier"] = args.m
    if args.classes is not None:
        overrides["num_classes"] = args.classes
    return dataclasses.replace(spec, **overrides) if overrides else spec


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def cmd_count(args):
    report = count_network(_load_spec(args))
    print(report.to_csv() if args.csv else report.to_text(), end="" if args.csv else "\n")
    if args.out:
        _write(args.out, report.to_csv())
    return EXIT_OK


def cmd_compare(args):
    alpha = 1.0 if args.alpha is None else args.alpha
    reports = []
    for name in args.networks:
        if name in BUILTIN_NAMES:
            spec = builtin_spec(name, alpha, args.m, args.classes)
        else:
            ns = argparse.Namespace(builtin=None, spec=name, alpha=args.alpha, m=args.m,
                                    classes=args.classes)
            spec = _load_spec(ns)
        reports.append(count_network(spec))
    table = compare_networks(reports)
    print(table.to_csv() if args.csv else table.to_text(), end="" if args.csv else "\n")
    if args.out:
        _write(args.out, table.to_csv())
    return EXIT_OK


def cmd_verify_tables(args):
    from .tables import verify_tables

    policy = CountingPolicy(conv_bias=args.conv_bias, bn_running_stats=args.bn_running_stats,
                            ops_per_mac=2 if args.flops_2x else 1)
    checks = verify_tables(policy)
    if args.csv:
        print("table,network,alpha,m,column,expected,computed,tolerance,status")
        for c in checks:
            print(f"{c.table},{c.network},{c.alpha:g},{c.m},{c.column},{c.expected},"
                  f"{c.computed:.6f},{c.tolerance:.6f},{'PASS' if c.passed else 'FAIL'}")
    else:
        for c in checks:
            print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} cells within tolerance", file=sys.stderr)
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.seed)
    width = max(map(len, results))
    for label, err in results.items():
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{label:<{width}}  max rel err {err:.3e}  {status}")
    worst = max(results.values())
    print(f"worst {worst:.3e} (tolerance {TOLERANCE:g})")
    return EXIT_OK if worst <= TOLERANCE else EXIT_RUNTIME


def cmd_train(args):
    from .data import load_cifar, synth_dataset
    from .train import TrainConfig, save_checkpoint, train

    if not args.synth and not args.data:
        raise UsageError("train needs a dataset: pass --data DIR or --synth")
    spec = _load_spec(args)
    if args.synth:
        classes = args.classes or spec.num_classes
        spec = dataclasses.replace(spec, num_classes=classes)
        train_set = synth_dataset(make_rng(args.seed), classes, args.per_class, spec.input_size)
        test_set = synth_dataset(make_rng(args.seed + 1), classes, max(1, args.per_class // 5),
                                 spec.input_size)
    else:
        try:
            train_set, test_set = load_cifar(args.data, args.variant)
        except (OSError, FormatError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        spec = dataclasses.replace(spec, num_classes=train_set.class_count)
    config = TrainConfig(base_lr=args.lr, lr_decay_epochs=args.decay_epochs,
                         lr_decay_factor=args.decay_factor, momentum=args.momentum,
                         weight_decay=args.weight_decay, epochs=args.epochs,
                         batch_size=args.batch_size, seed=args.seed,
                         augment=not args.no_augment, max_steps=args.steps)
    net = build_network(spec, make_rng(args.seed))
    log_path = Path(args.log)
    header = "epoch,step,lr,loss,train_acc,test_acc\n"
    _write(log_path, header)

    def on_epoch(row):
        with log_path.open("a", encoding="utf-8", newline="\n") as fh:
            test = "" if row.test_acc is None else f"{row.test_acc:.6f}"
            fh.write(f"{row.epoch},{row.step},{row.lr!r},{row.loss:.10g},{row.train_acc:.6f},{test}\n")
        print(f"epoch {row.epoch:>3}  step {row.step:>6}  lr {row.lr:g}  loss {row.loss:.4f}  "
              f"train_acc {row.train_acc:.4f}  test_acc {test or '-'}", flush=True)

    try:
        train(net, train_set, config, test=test_set, on_epoch=on_epoch)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.checkpoint:
        save_checkpoint(args.checkpoint, net)
    return EXIT_OK


def cmd_emit_spec(args):
    text = emit_spec(_load_spec(args))
    if args.out:
        _write(args.out, text)
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpdnet", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="batch-parallel worker threads (default: $DPDNET_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", help="per-layer parameter / MAC report")
    _add_spec_source(p)
    p.add_argument("--out", help="also write the CSV report here")
    p.add_argument("--csv", action="store_true", help="print CSV instead of a table")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("compare", help="side-by-side totals and ratios")
    p.add_argument("networks", nargs="+", help="builtin names or spec files")
    p.add_argument("--alpha", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--out")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify-tables", help="check counts against the published tables")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--conv-bias", action="store_true", help="count conv biases (control)")
    p.add_argument("--bn-running-stats", action="store_true", help="count BN running stats")
    p.add_argument("--flops-2x", action="store_true", help="count 2 ops per MAC (control)")
    p.set_defaults(func=cmd_verify_tables)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="momentum-SGD training")
    _add_spec_source(p)
    p.add_argument("--data", help="directory with the CIFAR binary batches")
    p.add_argument("--variant", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--synth", action="store_true", help="train on the synthetic dataset")
    p.add_argument("--per-class", type=int, default=50, help="synthetic images per class")
    p.add_argument("--steps", type=int, default=None, help="stop after this many steps")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--decay-epochs", type=int, nargs="*", default=[150, 225])
    p.add_argument("--decay-factor", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default="train_log.csv")
    p.add_argument("--checkpoint", default="checkpoint.dpd")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("emit-spec", help="print a network as a config document")
    _add_spec_source(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_emit_spec)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            ops.set_num_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SpecError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
