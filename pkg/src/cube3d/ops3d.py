"""Collective 3-D matrix-matrix and matrix-vector operations.

Every function here is called by all ranks in the same order with the
rank's own shards.  A 3-D product gathers its first operand along
``d.input_axis``, its second along ``d.weight_axis``, multiplies the local
blocks and reduce-scatters the partial result along ``d.output_axis``.
Backward passes are themselves 3-D products with permuted directions.

Operand layouts for each product form, in terms of the direction roles
``a`` (input), ``w`` (weight) and ``o`` (output)::

    form  A               B               C
    ab    rows(w a) cols(o)  rows(o) cols(a w)  rows(w o) cols(a)
    abt   rows(w a) cols(o)  rows(a) cols(o w)  rows(w o) cols(a)
    atb   rows(o a) cols(w)  rows(o w) cols(a)  rows(w) cols(a o)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import kernels
from .collectives import Endpoint
from .errors import BatchMismatch, ShapeMismatch
from .sharding import (
    BlockLayout,
    DiagonalVector,
    DirectionTriple,
    ShardedMatrix,
    layout_for,
)
from .topology import X, Y, Z

FORMS = ("ab", "abt", "atb")


@dataclass
class GradPair:
    value: Any
    saved: dict[str, Any] = field(default_factory=dict)


def operand_layouts(form: str, d: DirectionTriple) -> tuple[BlockLayout, BlockLayout, BlockLayout]:
    a, w, o = d.input_axis, d.weight_axis, d.output_axis
    if form == "ab":
        return layout_for("input", d), layout_for("weight", d), layout_for("output", d)
    if form == "abt":
        return layout_for("input", d), BlockLayout((a,), (o, w)), layout_for("output", d)
    if form == "atb":
        return BlockLayout((o, a), (w,)), BlockLayout((o, w), (a,)), BlockLayout((w,), (a, o))
    raise ValueError(f"unknown product form {form!r}")


def _effective(sm: ShardedMatrix, trans: bool):
    if trans:
        return sm.layout.T, np.swapaxes(sm.local, -1, -2), sm.global_shape[::-1]
    return sm.layout, sm.local, sm.global_shape


def product3d(
    comm: Endpoint,
    x: ShardedMatrix,
    y: ShardedMatrix,
    d: DirectionTriple,
    *,
    trans_x: bool = False,
    trans_y: bool = False,
    scatter: str = "rows",
    directions: DirectionTriple | None = None,
) -> ShardedMatrix:
    """``op(x) @ op(y)`` as gather / gather / local product / reduce-scatter."""
    if x.batch_shape != y.batch_shape:
        raise BatchMismatch(f"batch extents differ: {x.batch_shape} vs {y.batch_shape}")
    lx, ax, sx = _effective(x, trans_x)
    ly, ay, sy = _effective(y, trans_y)
    if sx[1] != sy[0]:
        raise ShapeMismatch(f"cannot multiply {sx} by {sy}")
    mx, dim_x = lx.minor
    my, dim_y = ly.minor
    if mx != d.input_axis or my != d.weight_axis:
        raise ShapeMismatch(
            f"operand layouts {lx} / {ly} are not gathered by directions {d}"
        )
    if lx.cols[0] != d.output_axis or ly.rows[0] != d.output_axis:
        raise ShapeMismatch(f"contraction blocks of {lx} / {ly} do not lie along {d}")
    calls = int(np.prod(x.batch_shape, dtype=np.int64))

    gx = comm.all_gather(comm.group(d.input_axis), ax, axis=dim_x, calls=calls)
    gy = comm.all_gather(comm.group(d.weight_axis), ay, axis=dim_y, calls=calls)
    comm.charge_compute(kernels.multiply_adds(gx.shape, gy.shape))
    partial = kernels.matmul(gx, gy)
    if scatter == "rows":
        out_layout = BlockLayout((lx.rows[0], d.output_axis), (ly.cols[0],))
        dim = -2
    elif scatter == "cols":
        out_layout = BlockLayout((lx.rows[0],), (ly.cols[0], d.output_axis))
        dim = -1
    else:
        raise ValueError(f"scatter must be 'rows' or 'cols', got {scatter!r}")
    out = comm.reduce_scatter(comm.group(d.output_axis), partial, axis=dim, calls=calls)
    return ShardedMatrix(
        (sx[0], sy[1]),
        out_layout,
        out,
        x.coords,
        x.p,
        directions if directions is not None else d.swap_io(),
        x.rank,
    )


def _dirs(d, A):
    return A.directions if d is None else d


def matmul_ab_fwd(comm, A: ShardedMatrix, B: ShardedMatrix, d: DirectionTriple | None = None):
    return product3d(comm, A, B, _dirs(d, A))


def matmul_abt_fwd(comm, A: ShardedMatrix, B: ShardedMatrix, d: DirectionTriple | None = None):
    return product3d(comm, A, B, _dirs(d, A), trans_y=True)


def matmul_atb_fwd(comm, A: ShardedMatrix, B: ShardedMatrix, d: DirectionTriple | None = None):
    return product3d(comm, A, B, _dirs(d, A), trans_x=True, scatter="cols")


def _retag(sm: ShardedMatrix, like: ShardedMatrix) -> ShardedMatrix:
    if sm.layout != like.layout:
        raise ShapeMismatch(f"gradient layout {sm.layout} differs from operand {like.layout}")
    sm.directions = like.directions
    return sm


def _perm(d: DirectionTriple, first: int, second: int, third: int) -> DirectionTriple:
    roles = (d.input_axis, d.weight_axis, d.output_axis)
    return DirectionTriple(roles[first], roles[second], roles[third])


# role indices into (input, weight, output)
_A, _W, _O = 0, 1, 2


def matmul_ab_bwd(comm, dC, A, B, d: DirectionTriple | None = None):
    """dA = dC B^T (directions o,w,a); dB = A^T dC (directions a,o,w)."""
    d = _dirs(d, A)
    dA = matmul_abt_fwd(comm, dC, B, _perm(d, _O, _W, _A))
    dB = matmul_atb_fwd(comm, A, dC, _perm(d, _A, _O, _W))
    return _retag(dA, A), _retag(dB, B)


def matmul_abt_bwd(comm, dC, A, B, d: DirectionTriple | None = None):
    """dA = dC B (directions o,w,a); dB = dC^T A (directions o,a,w)."""
    d = _dirs(d, A)
    dA = matmul_ab_fwd(comm, dC, B, _perm(d, _O, _W, _A))
    dB = matmul_atb_fwd(comm, dC, A, _perm(d, _O, _A, _W))
    return _retag(dA, A), _retag(dB, B)


def matmul_atb_bwd(comm, dC, A, B, d: DirectionTriple | None = None):
    """dA = B dC^T (directions w,o,a); dB = A dC (directions a,o,w)."""
    d = _dirs(d, A)
    dA = matmul_abt_fwd(comm, B, dC, _perm(d, _W, _O, _A))
    dB = matmul_ab_fwd(comm, A, dC, _perm(d, _A, _O, _W))
    return _retag(dA, A), _retag(dB, B)


FORWARD = {"ab": matmul_ab_fwd, "abt": matmul_abt_fwd, "atb": matmul_atb_fwd}
BACKWARD = {"ab": matmul_ab_bwd, "abt": matmul_abt_bwd, "atb": matmul_atb_bwd}


# -- matrix-vector -------------------------------------------------------------


def _vector_axes(A: ShardedMatrix, b: DiagonalVector) -> tuple[int, int, int]:
    if b.global_len != A.global_shape[1]:
        raise ShapeMismatch(f"vector of length {b.global_len} vs matrix {A.global_shape}")
    w = b.weight_axis
    if len(A.layout.cols) != 1 or A.layout.cols[0] == w:
        raise ShapeMismatch(f"columns of {A.layout} are not split by one non-weight axis")
    col = A.layout.cols[0]
    (bcast,) = {X, Y, Z} - {w, col}
    return col, bcast, w


def expand_vector(comm: Endpoint, A: ShardedMatrix, b: DiagonalVector) -> np.ndarray:
    """The segment of ``b`` matching A's local columns.

    The diagonal holder broadcasts its slice along the remaining plane axis
    (y for input-layout operands, z for output-layout ones), then the slices
    are all-gathered along the weight axis.
    """
    col, bcast, w = _vector_axes(A, b)
    n = b.global_len // (A.p * A.p)
    buf = b.shard if b.is_holder else np.empty(n, dtype=A.local.dtype)
    seg = comm.broadcast(comm.group(bcast), comm.coords[col], buf)
    return comm.all_gather(comm.group(w), seg)


def add_vec_fwd(comm, A: ShardedMatrix, b: DiagonalVector, expanded=None) -> ShardedMatrix:
    seg = expand_vector(comm, A, b) if expanded is None else expanded
    return A.with_local(A.local + seg)


def mul_vec_fwd(comm, A: ShardedMatrix, b: DiagonalVector, expanded=None) -> ShardedMatrix:
    seg = expand_vector(comm, A, b) if expanded is None else expanded
    return A.with_local(A.local * seg)


def reduce_to_diagonal(
    comm: Endpoint, A: ShardedMatrix, colsum: np.ndarray, weight_axis: int = X
) -> DiagonalVector:
    """Sum per-rank column sums into a diagonal vector laid out like the bias of ``A``.

    Reduce-scatter along the weight axis, then reduce along the plane axis
    onto the diagonal holder.  The second hop is the adjoint of the
    broadcast in :func:`expand_vector`.
    """
    col = A.layout.cols[0]
    (bcast,) = {X, Y, Z} - {weight_axis, col}
    part = comm.reduce_scatter(comm.group(weight_axis), colsum)
    total = comm.reduce(comm.group(bcast), comm.coords[col], part)
    holder = comm.coords[bcast] == comm.coords[col]
    return DiagonalVector(
        A.global_shape[1], total if holder else None, A.coords, A.p, weight_axis, A.rank
    )


def _column_sums(local: np.ndarray) -> np.ndarray:
    flat = local.reshape(-1, local.shape[-1])
    return flat.sum(axis=0)


def add_vec_bwd(comm, dC: ShardedMatrix, b: DiagonalVector):
    _vector_axes(dC, b)
    db = reduce_to_diagonal(comm, dC, _column_sums(dC.local), b.weight_axis)
    return dC.with_local(dC.local.copy()), db


def mul_vec_bwd(comm, dC: ShardedMatrix, A: ShardedMatrix, b: DiagonalVector, expanded=None):
    seg = expand_vector(comm, A, b) if expanded is None else expanded
    dA = dC.with_local(dC.local * seg)
    db = reduce_to_diagonal(comm, dC, _column_sums(dC.local * A.local), b.weight_axis)
    return dA, db
