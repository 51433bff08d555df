"""Rank-4 tensor helpers.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in
(batch, channels, height, width) order, C-contiguous. Everything in the
package works on double precision so finite-difference checks stay
meaningful.

Random draws come from ``numpy.random.Generator`` backed by PCG64, which
numpy guarantees to be stream-stable for a fixed seed.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError, SizeError

DTYPE = np.float64


def make_rng(seed: int | np.random.Generator | None = 0) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` (a generator is passed through)."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is not None and not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def _check_shape(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a 4-tuple (N, C, H, W), got {shape}")
    if any(d < 0 for d in shape):
        raise ShapeError(f"dimensions must be non-negative, got {shape}")
    size = 1
    for d in shape:
        size *= d
    if size > np.iinfo(np.intp).max // np.dtype(DTYPE).itemsize:
        raise SizeError(f"tensor of shape {shape} exceeds the addressable size")
    return shape


def tensor_new(shape, fill: float = 0.0) -> np.ndarray:
    """Allocate an (N, C, H, W) tensor with every element equal to ``fill``."""
    return np.full(_check_shape(shape), fill, dtype=DTYPE)


def offset(shape, n: int, c: int, h: int, w: int) -> int:
    """Flat row-major offset of element (n, c, h, w)."""
    _, C, H, W = shape
    return ((n * C + c) * H + h) * W + w


def unravel(shape, off: int) -> tuple[int, int, int, int]:
    """Inverse of :func:`offset`."""
    _, C, H, W = shape
    off, w = divmod(off, W)
    off, h = divmod(off, H)
    n, c = divmod(off, C)
    return n, c, h, w


def he_normal_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Draw i.i.d. N(0, 2 / fan_in) weights of the given shape."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    shape = _check_shape(shape)
    return rng.standard_normal(shape, dtype=DTYPE) * np.sqrt(2.0 / fan_in)
