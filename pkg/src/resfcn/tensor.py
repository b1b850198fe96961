"""Dense tensor helpers and seeded random streams.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order with at
most four axes, laid out as (batch, channel, height, width).  Training and
inference run in float32; float64 is used for finite-difference checks.
"""
from __future__ import annotations

import os
import zlib
from typing import Optional, Sequence, Union

import numpy as np

MAX_RANK = 4
FLOAT_TYPES = (np.float32, np.float64)

# Output finiteness checks are off on the hot path unless requested.
CHECK_FINITE = os.environ.get("RESFCN_CHECK_FINITE", "0") not in ("", "0")

Axes = Optional[Union[int, Sequence[int]]]


class TensorError(ValueError):
    """Raised on shape, rank or finiteness violations."""


def set_check_finite(enabled: bool) -> None:
    global CHECK_FINITE
    CHECK_FINITE = bool(enabled)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if CHECK_FINITE and not np.all(np.isfinite(x)):
        raise TensorError(f"non-finite values in {what}")
    return x


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Return a contiguous float array of rank <= 4."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim > MAX_RANK:
        raise TensorError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise TensorError(f"shape mismatch: {a.shape} vs {b.shape}")


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b)
    return check_finite(np.add(a, b), "elementwise_add")


def scale(a: np.ndarray, c: float) -> np.ndarray:
    if not np.isfinite(c):
        raise TensorError("scale factor must be finite")
    return check_finite(a * a.dtype.type(c), "scale")


def _normalize_axes(a: np.ndarray, axes: Axes) -> tuple:
    if axes is None:
        return tuple(range(a.ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    out = []
    for ax in axes:
        ax = int(ax)
        if not -a.ndim <= ax < a.ndim:
            raise TensorError(f"axis {ax} invalid for shape {a.shape}")
        out.append(ax % a.ndim)
    if len(set(out)) != len(out):
        raise TensorError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce_sum(a: np.ndarray, axes: Axes = None) -> np.ndarray:
    """Sum over ``axes`` (all axes when None); reduced axes are dropped."""
    ax = _normalize_axes(a, axes)
    return check_finite(np.asarray(a.sum(axis=ax)), "reduce_sum")


def mean_and_var(a: np.ndarray, axes: Axes = None):
    """Population mean and variance over ``axes``."""
    ax = _normalize_axes(a, axes)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    if a.size == 0 or count == 0:
        raise TensorError("empty reduction")
    mean = a.mean(axis=ax)
    var = np.mean(np.square(a - np.expand_dims(mean, ax)), axis=ax)
    return np.asarray(mean), np.asarray(var)


# --- random streams ---------------------------------------------------------
# PCG64 seeded through SeedSequence; named sub-streams are derived from the
# top-level seed so every subsystem draws independently of the others.


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for subsystem ``name`` under top-level ``seed``."""
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))


def split(rng: np.random.Generator, n: int) -> list:
    """Derive ``n`` independent child generators from ``rng``."""
    return list(rng.spawn(n))
