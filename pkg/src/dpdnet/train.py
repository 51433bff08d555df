"""Momentum-SGD training with a step learning-rate schedule.

Update rule for a parameter ``w`` with gradient ``g``::

    v <- momentum * v + (g + weight_decay * w)
    w <- w - lr * v

Weight decay only touches conv and FC weights (not BN affine parameters or
biases). The learning rate is multiplied by ``lr_decay_factor`` from the
first step of each epoch listed in ``lr_decay_epochs``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .data import Dataset, augment_batch
from .errors import DivergenceError, FormatError, ShapeError
from .tensor import DTYPE, make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.1
    lr_decay_epochs: list[int] = field(default_factory=lambda: [150, 225])
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 300
    batch_size: int = 128
    seed: int = 0
    augment: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        self.lr_decay_epochs = list(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ValueError("lr_decay_epochs must be strictly increasing")
        if self.lr_decay_epochs and self.lr_decay_epochs[-1] >= self.epochs:
            raise ValueError("every lr decay epoch must come before the last epoch")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Scheduled learning rate for a (0-based) epoch."""
    drops = sum(1 for e in config.lr_decay_epochs if epoch >= e)
    return config.base_lr * config.lr_decay_factor ** drops


class MomentumSGD:
    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {id(p): np.zeros_like(p.value) for p in self.params}

    def step(self, lr: float) -> None:
        for p in self.params:
            g = p.grad
            if p.decay and self.weight_decay:
                g = g + self.weight_decay * p.value
            v = self.velocity[id(p)]
            v *= self.momentum
            v += g
            p.value -= lr * v


@dataclass
class LogRow:
    epoch: int
    step: int
    lr: float
    loss: float
    train_acc: float
    test_acc: float | None


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    HEADER = ("epoch", "step", "lr", "loss", "train_acc", "test_acc")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.HEADER)
        for r in self.rows:
            writer.writerow([r.epoch, r.step, repr(r.lr), f"{r.loss:.10g}", f"{r.train_acc:.6f}",
                             "" if r.test_acc is None else f"{r.test_acc:.6f}"])
        return buf.getvalue()

    @property
    def final(self) -> LogRow:
        return self.rows[-1]


def evaluate(network, dataset: Dataset, batch_size: int = 256, stats: Dataset | None = None) -> float:
    """Inference-mode accuracy; normalises with ``stats`` (default: ``dataset``)."""
    stats = stats or dataset
    correct = 0
    for lo in range(0, len(dataset), batch_size):
        x = stats.normalize(dataset.images[lo:lo + batch_size])
        pred = network.forward(x, training=False).argmax(axis=1)
        correct += int((pred == dataset.labels[lo:lo + batch_size]).sum())
    return correct / max(1, len(dataset))


def train(network, dataset: Dataset, config: TrainConfig, test: Dataset | None = None,
          on_epoch=None) -> TrainLog:
    """Train ``network`` in place and return the per-epoch log.

    ``train_acc`` is the running accuracy of the training-mode forward passes
    over the epoch; ``test_acc`` is an inference-mode evaluation of ``test``
    normalised with the training statistics.
    """
    if dataset.images.shape[2] != network.spec.input_size and network.spec.head.pool is not None:
        raise ShapeError(
            f"dataset images are {dataset.images.shape[2]}px but the network expects "
            f"{network.spec.input_size}px"
        )
    rng = make_rng(config.seed)
    opt = MomentumSGD(network.parameters(), config.momentum, config.weight_decay)
    out = TrainLog()
    step = 0
    n = len(dataset)
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = seen = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            x = dataset.images[idx]
            if config.augment:
                x = augment_batch(rng, x)
            x = dataset.normalize(x)
            y = dataset.labels[idx]
            logits = network.forward(x, training=True)
            loss, grad = ops.softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise DivergenceError(step, loss)
            network.zero_grad()
            network.backward(grad)
            opt.step(lr)
            step += 1
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
            seen += len(idx)
            if config.max_steps is not None and step >= config.max_steps:
                break
        test_acc = evaluate(network, test, stats=dataset) if test is not None else None
        row = LogRow(epoch, step, lr, loss_sum / seen, correct / seen, test_acc)
        out.rows.append(row)
        log.info("epoch %d step %d lr %g loss %.4f train_acc %.4f test_acc %s",
                 epoch, step, lr, row.loss, row.train_acc, test_acc)
        if on_epoch is not None:
            on_epoch(row)
        if config.max_steps is not None and step >= config.max_steps:
            break
    return out


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DPDCKPT\x00"
CHECKPOINT_VERSION = 1


def network_state(network) -> dict[str, np.ndarray]:
    state = {p.name: p.value for p in network.parameters()}
    state.update(network.buffers())
    return state


def save_checkpoint(path, network) -> None:
    """Write every parameter and BN running statistic.

    Layout (little-endian): 8-byte magic ``DPDCKPT\\0``, u32 version, u32
    entry count, then per entry: u16 name length, UTF-8 name, u8 rank,
    rank x u32 dims, float64 values in C order.
    """
    state = network_state(network)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            out[name] = arr.astype(DTYPE)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def load_checkpoint(path, network) -> None:
    """Copy checkpoint values into ``network`` (names and shapes must match)."""
    saved = read_checkpoint(path)
    state = network_state(network)
    if set(saved) != set(state):
        missing = sorted(set(state) - set(saved))
        extra = sorted(set(saved) - set(state))
        raise FormatError(f"checkpoint does not match network (missing {missing[:3]}, extra {extra[:3]})")
    for name, arr in state.items():
        if saved[name].shape != arr.shape:
            raise FormatError(f"{name}: shape {saved[name].shape} != {arr.shape}")
        arr[...] = saved[name]
