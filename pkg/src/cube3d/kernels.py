"""Local (per-rank) dense products.

``ordered`` accumulates rank-1 updates in ascending contraction index, which
is exactly the summation order of a textbook triple loop with the innermost
index ascending.  ``blas`` hands the product to numpy/BLAS; its summation
order is unspecified.
"""

from __future__ import annotations

import numpy as np

_KERNEL = "ordered"


def set_kernel(name: str) -> str:
    global _KERNEL
    if name not in ("ordered", "blas"):
        raise ValueError(f"unknown kernel {name!r}")
    prev, _KERNEL = _KERNEL, name
    return prev


def get_kernel() -> str:
    return _KERNEL


def ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` over the last two dims, batch dims broadcast, fixed summation order."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = a.shape[-1]
    if b.shape[-2] != n:
        raise ValueError(f"contraction mismatch {a.shape} @ {b.shape}")
    if n == 0:
        shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
        return np.zeros(shape, dtype=np.result_type(a, b))
    acc = a[..., :, 0:1] * b[..., 0:1, :]
    for t in range(1, n):
        acc += a[..., :, t : t + 1] * b[..., t : t + 1, :]
    return acc


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _KERNEL == "blas":
        return np.matmul(a, b)
    return ordered_matmul(a, b)


def multiply_adds(a_shape, b_shape) -> int:
    batch = np.broadcast_shapes(tuple(a_shape[:-2]), tuple(b_shape[:-2]))
    return int(np.prod(batch, dtype=np.int64)) * a_shape[-2] * a_shape[-1] * b_shape[-1]
