"""Load-balanced block layouts for matrices and diagonal vectors on the cube.

A matrix of global shape ``(R, C)`` is cut into blocks addressed by cube
axes.  One dimension is split by two axes (``p * p`` blocks, major axis
first) and the other by a single axis (``p`` blocks).  With the default
directions (input gathers along y, weights along x, outputs scatter along z)
the three named layouts are::

    input   A[(i*p + j)*m : +m,   l*np : +np]       rows (x, y)  cols (z,)
    weight  B[l*np : +np,         (j*p + i)*k : +k]  rows (z,)    cols (y, x)
    output  C[(i*p + l)*m : +m,   j*kp : +kp]       rows (x, z)  cols (y,)

for rank ``(i, j, l)``, where ``m = M / p**2``, ``np = N / p`` and so on.
Arrays may carry leading batch dimensions; only the last two are split.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DirectionClash, InconsistentFamily, IndivisibleShape, ShapeMismatch
from .topology import AXIS_NAMES, X, Y, Z, Coords, CubeTopology, parse_axis


@dataclass(frozen=True)
class DirectionTriple:
    """Cube axes used to gather the input, gather the weight and scatter the output."""

    input_axis: int = Y
    weight_axis: int = X
    output_axis: int = Z

    def __post_init__(self):
        axes = tuple(parse_axis(a) for a in (self.input_axis, self.weight_axis, self.output_axis))
        object.__setattr__(self, "input_axis", axes[0])
        object.__setattr__(self, "weight_axis", axes[1])
        object.__setattr__(self, "output_axis", axes[2])
        if len(set(axes)) != 3:
            raise DirectionClash(f"direction axes must be distinct, got {self}")

    @classmethod
    def parse(cls, spec: str) -> DirectionTriple:
        """``"yxz"`` -> input y, weight x, output z."""
        spec = spec.replace(",", "").replace(" ", "")
        if len(spec) != 3:
            raise DirectionClash(f"need three axes, got {spec!r}")
        return cls(*spec)

    def swap_io(self) -> DirectionTriple:
        return DirectionTriple(self.output_axis, self.weight_axis, self.input_axis)

    def __str__(self) -> str:
        return "".join(AXIS_NAMES[a] for a in (self.input_axis, self.weight_axis, self.output_axis))


DEFAULT_DIRECTIONS = DirectionTriple()


class LayoutKind(enum.Enum):
    INPUT = "input"
    WEIGHT = "weight"
    OUTPUT = "output"


@dataclass(frozen=True)
class BlockLayout:
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    def __post_init__(self):
        axes = self.rows + self.cols
        if sorted(axes) != [X, Y, Z] or not (1 <= len(self.rows) <= 2):
            raise DirectionClash(f"layout must use each axis once: rows={self.rows} cols={self.cols}")

    @property
    def T(self) -> BlockLayout:
        return BlockLayout(self.cols, self.rows)

    @property
    def minor(self) -> tuple[int, int]:
        """(axis, dim) of the sub-splitting axis; dim is -2 for rows, -1 for cols."""
        if len(self.rows) == 2:
            return self.rows[1], -2
        return self.cols[1], -1

    def divisors(self, p: int) -> tuple[int, int]:
        return p ** len(self.rows), p ** len(self.cols)

    def shard_shape(self, shape: tuple[int, int], p: int) -> tuple[int, int]:
        dr, dc = self.divisors(p)
        return shape[0] // dr, shape[1] // dc

    def bounds(self, c: Coords, shape: tuple[int, int], p: int) -> tuple[range, range]:
        return _span(self.rows, c, shape[0], p), _span(self.cols, c, shape[1], p)

    def __str__(self) -> str:
        def fmt(axes):
            return "".join(AXIS_NAMES[a] for a in axes)

        return f"rows({fmt(self.rows)})cols({fmt(self.cols)})"


def _span(axes: tuple[int, ...], c: Coords, n: int, p: int) -> range:
    block = 0
    for a in axes:
        block = block * p + c[a]
    size = n // p ** len(axes)
    return range(block * size, (block + 1) * size)


def layout_for(kind: LayoutKind | str, d: DirectionTriple = DEFAULT_DIRECTIONS) -> BlockLayout:
    kind = LayoutKind(kind)
    a, w, o = d.input_axis, d.weight_axis, d.output_axis
    if kind is LayoutKind.INPUT:
        return BlockLayout((w, a), (o,))
    if kind is LayoutKind.WEIGHT:
        return BlockLayout((o,), (a, w))
    return BlockLayout((w, o), (a,))


def check_divisible(shape: tuple[int, int], p: int, names: tuple[str, str] = ("rows", "cols")):
    """Both dimensions must split into p*p blocks; shapes are never padded."""
    for name, n in zip(names, shape):
        if n % (p * p):
            raise IndivisibleShape(name, n, p * p)


@dataclass
class ShardedMatrix:
    global_shape: tuple[int, int]
    layout: BlockLayout
    local: np.ndarray
    coords: Coords
    p: int
    directions: DirectionTriple = DEFAULT_DIRECTIONS
    rank: int = field(default=-1)

    def __post_init__(self):
        self.global_shape = tuple(int(n) for n in self.global_shape)
        expect = self.layout.shard_shape(self.global_shape, self.p)
        if tuple(self.local.shape[-2:]) != expect:
            raise ShapeMismatch(
                f"local shard {self.local.shape} does not match {expect} for global "
                f"{self.global_shape} under {self.layout} at p={self.p}"
            )

    @property
    def kind(self) -> LayoutKind | None:
        for k in LayoutKind:
            if layout_for(k, self.directions) == self.layout:
                return k
        return None

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return tuple(self.local.shape[:-2])

    @property
    def nbytes_elems(self) -> int:
        return int(self.local.size)

    def bounds(self) -> tuple[range, range]:
        return self.layout.bounds(self.coords, self.global_shape, self.p)

    def with_local(self, local: np.ndarray, **changes) -> ShardedMatrix:
        kw = dict(
            global_shape=self.global_shape,
            layout=self.layout,
            local=local,
            coords=self.coords,
            p=self.p,
            directions=self.directions,
            rank=self.rank,
        )
        kw.update(changes)
        return ShardedMatrix(**kw)


def shard_bounds(
    layout: LayoutKind | str | BlockLayout,
    c: Coords | tuple[int, int, int],
    shape: tuple[int, int],
    p: int,
    directions: DirectionTriple = DEFAULT_DIRECTIONS,
) -> tuple[range, range]:
    check_divisible(shape, p)
    bl = layout if isinstance(layout, BlockLayout) else layout_for(layout, directions)
    return bl.bounds(Coords(*c), shape, p)


def partition(
    gm: np.ndarray,
    layout: LayoutKind | str | BlockLayout,
    topo: CubeTopology,
    directions: DirectionTriple = DEFAULT_DIRECTIONS,
    *,
    strict: bool = True,
) -> list[ShardedMatrix]:
    """Split ``gm`` (last two dims) into one shard per rank, ordered by rank.

    ``strict`` applies the uniform ``p*p`` divisibility rule to both
    dimensions; with ``strict=False`` only what the layout needs is checked.
    """
    gm = np.asarray(gm)
    if gm.ndim < 2:
        raise ShapeMismatch(f"need a matrix, got shape {gm.shape}")
    bl = layout if isinstance(layout, BlockLayout) else layout_for(layout, directions)
    shape = tuple(gm.shape[-2:])
    p = topo.p
    if strict:
        check_divisible(shape, p)
    else:
        for name, n, dv in zip(("rows", "cols"), shape, bl.divisors(p)):
            if n % dv:
                raise IndivisibleShape(name, n, dv)
    out = []
    for r in range(topo.P):
        c = topo.coords_of(r)
        rr, cr = bl.bounds(c, shape, p)
        local = np.array(gm[..., rr.start : rr.stop, cr.start : cr.stop], copy=True)
        out.append(ShardedMatrix(shape, bl, local, c, p, directions, r))
    return out


def collect(shards: Sequence[ShardedMatrix]) -> np.ndarray:
    if not shards:
        raise InconsistentFamily("empty shard family")
    first = shards[0]
    P = first.p**3
    if len(shards) != P:
        raise InconsistentFamily(f"expected {P} shards, got {len(shards)}")
    seen = set()
    for s in shards:
        if (s.layout, s.global_shape, s.p, s.batch_shape, s.local.dtype) != (
            first.layout,
            first.global_shape,
            first.p,
            first.batch_shape,
            first.local.dtype,
        ):
            raise InconsistentFamily(
                f"shard at {s.coords} has layout {s.layout} shape {s.global_shape}; "
                f"expected {first.layout} {first.global_shape}"
            )
        seen.add(tuple(s.coords))
    if len(seen) != P:
        raise InconsistentFamily("duplicate or missing coordinates in shard family")
    out = np.empty(first.batch_shape + first.global_shape, dtype=first.local.dtype)
    for s in shards:
        rr, cr = s.bounds()
        out[..., rr.start : rr.stop, cr.start : cr.stop] = s.local
    return out


def per_rank_memory(
    shape_a: tuple[int, int], shape_b: tuple[int, int], shape_c: tuple[int, int], p: int
) -> int:
    """Elements held per rank for C = A B with A, B, C in the balanced layouts."""
    (M, N), (N2, K), (M2, K2) = shape_a, shape_b, shape_c
    if (N, M, K) != (N2, M2, K2):
        raise ShapeMismatch(f"shapes {shape_a} {shape_b} {shape_c} do not chain")
    for name, n in (("M", M), ("N", N), ("K", K)):
        if n % (p * p):
            raise IndivisibleShape(name, n, p * p)
    return (M // p**2) * (N // p) + (N // p) * (K // p**2) + (M // p**2) * (K // p)


def zero_pad(gm: np.ndarray, multiple: int) -> np.ndarray:
    """Explicitly zero-pad the last two dims up to a multiple (caller's choice)."""
    gm = np.asarray(gm)
    pads = [(0, 0)] * (gm.ndim - 2) + [(0, (-n) % multiple) for n in gm.shape[-2:]]
    return np.pad(gm, pads)


# -- diagonal vectors --------------------------------------------------------


def _plane_axes(weight_axis: int) -> tuple[int, int]:
    u, v = (a for a in (X, Y, Z) if a != weight_axis)
    return u, v


@dataclass
class DiagonalVector:
    """A length-N vector stored only on ranks whose two non-weight coordinates agree.

    Holder ``(i, t, t)`` (weight axis x) keeps ``b[t*N/p + i*N/p**2 : +N/p**2]``.
    """

    global_len: int
    shard: np.ndarray | None
    coords: Coords
    p: int
    weight_axis: int = X
    rank: int = -1

    def __post_init__(self):
        if self.is_holder:
            if self.shard is None or self.shard.shape[-1] != self.global_len // self.p**2:
                raise ShapeMismatch(f"diagonal rank {self.coords} needs a slice of "
                                    f"{self.global_len // self.p**2}")
        elif self.shard is not None:
            raise ShapeMismatch(f"off-diagonal rank {self.coords} must not hold a slice")

    @property
    def is_holder(self) -> bool:
        u, v = _plane_axes(self.weight_axis)
        return self.coords[u] == self.coords[v]

    @property
    def span(self) -> range | None:
        if not self.is_holder:
            return None
        return diagonal_span(self.coords, self.global_len, self.p, self.weight_axis)


def diagonal_span(c: Coords, n: int, p: int, weight_axis: int = X) -> range:
    u, _ = _plane_axes(weight_axis)
    size = n // (p * p)
    start = c[u] * (n // p) + c[weight_axis] * size
    return range(start, start + size)


def partition_vector(
    b: np.ndarray, topo: CubeTopology, weight_axis: int = X
) -> list[DiagonalVector]:
    b = np.asarray(b)
    n = b.shape[-1]
    p = topo.p
    if n % (p * p):
        raise IndivisibleShape("length", n, p * p)
    out = []
    u, v = _plane_axes(weight_axis)
    for r in range(topo.P):
        c = topo.coords_of(r)
        shard = None
        if c[u] == c[v]:
            sp = diagonal_span(c, n, p, weight_axis)
            shard = np.array(b[..., sp.start : sp.stop], copy=True)
        out.append(DiagonalVector(n, shard, c, p, weight_axis, r))
    return out


def collect_vector(shards: Sequence[DiagonalVector]) -> np.ndarray:
    if not shards:
        raise InconsistentFamily("empty vector family")
    first = shards[0]
    if len(shards) != first.p**3:
        raise InconsistentFamily(f"expected {first.p ** 3} shards, got {len(shards)}")
    holders = [s for s in shards if s.is_holder]
    for s in shards:
        if (s.global_len, s.p, s.weight_axis) != (first.global_len, first.p, first.weight_axis):
            raise InconsistentFamily("vector shards disagree on length, cube or weight axis")
    if len(holders) != first.p**2:
        raise InconsistentFamily("wrong number of diagonal holders")
    ref = holders[0].shard
    out = np.empty(ref.shape[:-1] + (first.global_len,), dtype=ref.dtype)
    covered = 0
    for s in holders:
        sp = s.span
        out[..., sp.start : sp.stop] = s.shard
        covered += len(sp)
    if covered != first.global_len:
        raise InconsistentFamily("diagonal slices do not tile the vector")
    return out
