"""Central finite differences and error norms."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import NonFinite


def _loss(lossfn: Callable[[], float]) -> float:
    v = float(lossfn())
    if not np.isfinite(v):
        raise NonFinite(f"loss evaluated to {v}")
    return v


def finite_diff(
    lossfn: Callable[[], float],
    param: np.ndarray,
    step: float = 1e-5,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Estimate d lossfn / d param by (L(t+h e) - L(t-h e)) / 2h.

    ``param`` is perturbed in place and restored; ``lossfn`` must read it.
    With ``indices`` only those entries are estimated (the rest stay NaN).
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    grad = np.full(param.shape, np.nan) if indices is not None else np.zeros(param.shape)
    it = np.ndindex(param.shape) if indices is None else indices
    for idx in it:
        old = param[idx]
        param[idx] = old + step
        up = _loss(lossfn)
        param[idx] = old - step
        down = _loss(lossfn)
        param[idx] = old
        grad[idx] = (up - down) / (2 * step)
    return grad


def rel_err(got, want) -> float:
    """max|got - want| / max|want|, with an absolute fallback for an all-zero reference."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        raise ValueError(f"shape {got.shape} vs {want.shape}")
    if got.size == 0:
        return 0.0
    diff = np.max(np.abs(got - want))
    scale = np.max(np.abs(want))
    return float(diff / scale) if scale > 0 else float(diff)


def sample_indices(shape: tuple[int, ...], count: int, rng: np.random.Generator):
    """``count`` distinct multi-indices (all of them if the array is smaller)."""
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(int(f), shape) for f in np.sort(flat)]
