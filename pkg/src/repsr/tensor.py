"""Dense NCHW tensor helpers.

Tensors are plain ``numpy.ndarray`` objects in row-major (n, c, h, w) order.
This module only adds the few primitives the fusion code and the layers need
on top of numpy: a checked permute+reshape, a checked batched matmul, and a
seeded normal initializer.
"""
from __future__ import annotations

import os
from typing import Sequence

import numpy as np

#: Identifier of the bit generator behind :func:`make_rng`; written into weight-file headers.
RNG_ALGORITHM = "numpy.PCG64"

DEFAULT_DTYPE = np.float32

# Finite-value checks are cheap relative to convolutions but still opt-in.
DEBUG = os.environ.get("REPSR_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when tensor dimensions are incompatible with an operation."""


class NonFiniteError(FloatingPointError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def as_dtype(name: str | np.dtype | type) -> np.dtype:
    """Map ``"f32"``/``"f64"`` (or any numpy float dtype) to a numpy dtype."""
    aliases = {"f32": np.float32, "float32": np.float32, "f64": np.float64, "float64": np.float64}
    if isinstance(name, str):
        try:
            return np.dtype(aliases[name])
        except KeyError:
            raise ValueError(f"unsupported precision {name!r}") from None
    dt = np.dtype(name)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dt}")
    return dt


def dtype_name(dt: np.dtype | type) -> str:
    return "f64" if np.dtype(dt) == np.float64 else "f32"


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if DEBUG and not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def permute_reshape(t: np.ndarray, perm: Sequence[int] | None, new_dims: Sequence[int]) -> np.ndarray:
    """Permute axes of ``t`` and lay the result out contiguously as ``new_dims``.

    ``perm=None`` keeps the axis order. The returned array never aliases ``t``.
    """
    src = t if perm is None else np.transpose(t, tuple(perm))
    new_dims = tuple(int(d) for d in new_dims)
    if int(np.prod(new_dims, dtype=np.int64)) != src.size:
        raise ShapeError(f"cannot reshape {src.shape} (size {src.size}) to {new_dims}")
    return np.ascontiguousarray(src).reshape(new_dims).copy()


def batched_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Multiply stacks of matrices slice by slice.

    ``a`` is (B, p, q) and ``b`` is (B, q, r); either batch may be 1 and is then
    broadcast to the other.
    """
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"batched_matmul expects 3-d stacks, got {a.shape} and {b.shape}")
    if a.shape[2] != b.shape[1]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if a.shape[0] != b.shape[0] and 1 not in (a.shape[0], b.shape[0]):
        raise ShapeError(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    return check_finite(np.matmul(a, b), "batched_matmul output")


def seeded_normal(dims: Sequence[int], mean: float, stddev: float, rng: np.random.Generator,
                  dtype=DEFAULT_DTYPE) -> np.ndarray:
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    dims = tuple(int(d) for d in dims)
    if stddev == 0:
        return np.full(dims, mean, dtype=dtype)
    # Draw in f64 so that f32 and f64 models built from the same seed agree.
    return rng.normal(mean, stddev, size=dims).astype(dtype)
