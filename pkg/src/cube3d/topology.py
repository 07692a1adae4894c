"""The p x p x p processor cube and its per-axis process groups."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from .errors import NotACube, OutOfRange

X, Y, Z = 0, 1, 2
AXIS_NAMES = "xyz"


def parse_axis(axis: int | str) -> int:
    if isinstance(axis, str):
        try:
            return AXIS_NAMES.index(axis.lower())
        except ValueError:
            raise ValueError(f"unknown axis {axis!r}") from None
    if axis not in (X, Y, Z):
        raise ValueError(f"unknown axis {axis!r}")
    return axis


class Coords(NamedTuple):
    i: int
    j: int
    l: int  # noqa: E741


@dataclass(frozen=True)
class AxisGroup:
    axis: int
    members: tuple[int, ...]
    my_position: int

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class CubeTopology:
    p: int

    def __post_init__(self):
        if self.p < 1:
            raise NotACube(f"cube side must be positive, got {self.p}")

    @property
    def P(self) -> int:
        return self.p**3

    def check(self, c: Coords | tuple[int, int, int]) -> Coords:
        c = Coords(*c)
        for name, v in zip("ijl", c):
            if not 0 <= v < self.p:
                raise OutOfRange(f"coordinate {name}={v} outside [0, {self.p})")
        return c

    def rank_of(self, c: Coords | tuple[int, int, int]) -> int:
        i, j, l = self.check(c)  # noqa: E741
        return (i * self.p + j) * self.p + l

    def coords_of(self, rank: int) -> Coords:
        if not 0 <= rank < self.P:
            raise OutOfRange(f"rank {rank} outside [0, {self.P})")
        i, rem = divmod(rank, self.p * self.p)
        j, l = divmod(rem, self.p)  # noqa: E741
        return Coords(i, j, l)

    def axis_group(self, c: Coords | tuple[int, int, int], axis: int | str) -> AxisGroup:
        c = self.check(c)
        axis = parse_axis(axis)
        members = []
        for v in range(self.p):
            cc = list(c)
            cc[axis] = v
            members.append(self.rank_of(cc))
        return AxisGroup(axis, tuple(members), c[axis])

    def groups(self, axis: int | str) -> list[AxisGroup]:
        """All p*p disjoint groups along ``axis`` (position 0 representatives)."""
        axis = parse_axis(axis)
        seen = []
        for r in range(self.P):
            c = self.coords_of(r)
            if c[axis] == 0:
                seen.append(self.axis_group(c, axis))
        return seen


def build_cube(P: int) -> CubeTopology:
    if P < 1:
        raise NotACube(f"rank count must be positive, got {P}")
    p = round(P ** (1 / 3))
    for cand in (p - 1, p, p + 1):
        if cand >= 1 and cand**3 == P:
            return CubeTopology(cand)
    raise NotACube(f"{P} ranks do not form a cube")
