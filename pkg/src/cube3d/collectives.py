"""In-process collective transport for SPMD rank workers.

Every rank owns one :class:`Endpoint`.  Collectives rendezvous on a shared
:class:`Transport`; each member deposits its buffer, waits for the rest of
its group, then builds its own result from the full list of contributions
in ascending group position.  Reductions therefore have a fixed summation
order and results do not depend on thread scheduling.

Two schedules drive the rank workers:

* ``"threads"``: one free-running thread per rank.
* ``"lockstep"``: one thread per rank, but only the baton holder runs.  The
  baton moves to the next runnable rank (ascending, cyclic) whenever the
  holder blocks on an incomplete collective or finishes.  Exactly one rank
  executes at any instant, so the interleaving is fully reproducible.

Traffic accounting is ring-style: a collective over ``p`` members moves
``(p - 1) / p`` of the gathered or reduced payload through each member.
"""

from __future__ import annotations

import copy
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import Aborted, Desync, LengthMismatch
from .topology import AxisGroup, Coords, CubeTopology, parse_axis

KINDS = ("broadcast", "all_gather", "reduce_scatter", "all_reduce", "reduce")
SCHEDULES = ("threads", "lockstep")


@dataclass
class CostCounters:
    elements_sent: int = 0
    elements_received: int = 0
    sent_by_kind: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    received_by_kind: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    calls: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    multiply_adds: int = 0

    def charge(self, kind: str, sent: int, received: int, calls: int = 1) -> None:
        self.elements_sent += sent
        self.elements_received += received
        self.sent_by_kind[kind] += sent
        self.received_by_kind[kind] += received
        self.calls[kind] += calls

    def snapshot(self) -> CostCounters:
        return copy.deepcopy(self)

    def __add__(self, other: CostCounters) -> CostCounters:
        out = self.snapshot()
        out.elements_sent += other.elements_sent
        out.elements_received += other.elements_received
        out.multiply_adds += other.multiply_adds
        for src, dst in (
            (other.sent_by_kind, out.sent_by_kind),
            (other.received_by_kind, out.received_by_kind),
            (other.calls, out.calls),
        ):
            for k, v in src.items():
                dst[k] += v
        return out

    def as_dict(self) -> dict[str, Any]:
        return {
            "elements_sent": self.elements_sent,
            "elements_received": self.elements_received,
            "sent_by_kind": {k: self.sent_by_kind[k] for k in KINDS if self.sent_by_kind[k]},
            "received_by_kind": {
                k: self.received_by_kind[k] for k in KINDS if self.received_by_kind[k]
            },
            "calls": {k: self.calls[k] for k in KINDS if self.calls[k]},
            "multiply_adds": self.multiply_adds,
        }


@dataclass
class _Slot:
    kind: str
    shape: tuple[int, ...]
    root: int | None
    op: str | None
    members: tuple[int, ...]
    payloads: list[Any]
    arrived: int = 0
    departed: int = 0

    @property
    def complete(self) -> bool:
        return self.arrived == len(self.members)


class Transport:
    def __init__(self, topo: CubeTopology, schedule: str = "threads", timeout: float = 60.0):
        if schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {schedule!r}")
        self.topo = topo
        self.schedule = schedule
        self.timeout = timeout
        self._cv = threading.Condition()
        self._slots: dict[tuple, _Slot] = {}
        self._error: BaseException | None = None
        self._counters = [CostCounters() for _ in range(topo.P)]
        self._endpoints = [Endpoint(r, self) for r in range(topo.P)]
        # lockstep baton state
        self._holder = 0
        self._waiting: set[int] = set()
        self._done: set[int] = set()

    def endpoint(self, rank: int) -> Endpoint:
        return self._endpoints[rank]

    @property
    def endpoints(self) -> list[Endpoint]:
        return list(self._endpoints)

    def counters(self, rank: int) -> CostCounters:
        return self._counters[rank].snapshot()

    def all_counters(self) -> list[CostCounters]:
        return [c.snapshot() for c in self._counters]

    def total_counters(self) -> CostCounters:
        total = CostCounters()
        for c in self._counters:
            total = total + c
        return total

    def reset_counters(self) -> None:
        """Driver-side reset; call only while no rank worker is running."""
        self._counters = [CostCounters() for _ in range(self.topo.P)]

    # -- rendezvous -----------------------------------------------------

    def _fail(self, exc: BaseException) -> None:
        with self._cv:
            if self._error is None:
                self._error = exc
            self._cv.notify_all()

    def _check_error(self) -> None:
        if self._error is not None:
            raise Aborted(f"run aborted: {self._error!r}")

    def _pass_baton(self, cur: int) -> None:
        P = self.topo.P
        for k in range(1, P + 1):
            r = (cur + k) % P
            if r not in self._done and r not in self._waiting:
                self._holder = r
                return
        self._holder = -1
        if len(self._done) < P and self._error is None:
            stuck = sorted(self._waiting)
            self._error = Desync(f"deadlock: ranks {stuck} wait on collectives nobody completes")

    def _enter(self, rank: int) -> None:
        if self.schedule != "lockstep":
            return
        with self._cv:
            self._cv.wait_for(lambda: self._holder == rank or self._error is not None)
            self._check_error()

    def _exit(self, rank: int) -> None:
        if self.schedule != "lockstep":
            return
        with self._cv:
            self._done.add(rank)
            self._waiting.discard(rank)
            if self._holder == rank or self._holder == -1:
                self._pass_baton(rank)
            self._cv.notify_all()

    def _rendezvous(
        self,
        rank: int,
        group: AxisGroup,
        seq: int,
        kind: str,
        shape: tuple[int, ...],
        root: int | None,
        op: str | None,
        payload: Any,
    ) -> list[Any]:
        key = (group.members, seq)
        p = group.size
        lockstep = self.schedule == "lockstep"
        with self._cv:
            self._check_error()
            slot = self._slots.get(key)
            if slot is None:
                slot = _Slot(kind, shape, root, op, group.members, [None] * p)
                self._slots[key] = slot
            err = None
            if (slot.kind, slot.root, slot.op) != (kind, root, op):
                err = Desync(
                    f"rank {rank} called {kind}(root={root}, op={op}) as collective #{seq} "
                    f"of group {group.members}, peers called "
                    f"{slot.kind}(root={slot.root}, op={slot.op})"
                )
            elif slot.shape != shape:
                err = LengthMismatch(
                    f"rank {rank} passed shape {shape} to {kind} #{seq} of group "
                    f"{group.members}, peers passed {slot.shape}"
                )
            if err is not None:
                self._error = err
                self._cv.notify_all()
                raise err
            slot.payloads[group.my_position] = payload
            slot.arrived += 1
            if slot.complete:
                self._waiting.difference_update(slot.members)
                self._cv.notify_all()
            else:
                if lockstep:
                    self._waiting.add(rank)
                    self._pass_baton(rank)
                    self._cv.notify_all()

                def ready():
                    if self._error is not None:
                        return True
                    if not slot.complete:
                        return False
                    return not lockstep or self._holder == rank

                if not self._cv.wait_for(ready, timeout=None if lockstep else self.timeout):
                    self._error = Desync(
                        f"rank {rank} timed out in {kind} #{seq} of group {group.members}"
                    )
                    self._cv.notify_all()
                    raise self._error
                if not (slot.complete and (not lockstep or self._holder == rank)):
                    if self._error is not None:
                        raise Aborted(f"run aborted: {self._error!r}")
            payloads = list(slot.payloads)
            slot.departed += 1
            if slot.departed == p:
                del self._slots[key]
        return payloads


class Endpoint:
    """One rank's handle on the transport.  Owned by exactly one worker."""

    def __init__(self, rank: int, transport: Transport):
        self.rank = rank
        self.transport = transport
        self.topo = transport.topo
        self.coords: Coords = self.topo.coords_of(rank)
        self._seq: dict[tuple[int, ...], int] = defaultdict(int)

    @property
    def counters(self) -> CostCounters:
        return self.transport._counters[self.rank]

    def group(self, axis: int | str) -> AxisGroup:
        return self.topo.axis_group(self.coords, parse_axis(axis))

    def world(self) -> AxisGroup:
        members = tuple(range(self.topo.P))
        return AxisGroup(-1, members, self.rank)

    def charge_compute(self, multiply_adds: int) -> None:
        self.counters.multiply_adds += int(multiply_adds)

    def _exchange(self, g, kind, buf, root=None, op=None) -> list[np.ndarray]:
        if self.rank not in g.members or g.members[g.my_position] != self.rank:
            raise Desync(f"rank {self.rank} is not at position {g.my_position} of {g.members}")
        seq = self._seq[g.members]
        self._seq[g.members] = seq + 1
        return self.transport._rendezvous(
            self.rank, g, seq, kind, tuple(buf.shape), root, op, buf
        )

    def _as_group(self, g: AxisGroup | int | str) -> AxisGroup:
        return g if isinstance(g, AxisGroup) else self.group(g)

    def broadcast(self, g, root_position: int, buf: np.ndarray, calls: int = 1) -> np.ndarray:
        g = self._as_group(g)
        buf = np.asarray(buf)
        if g.size == 1:
            return buf.copy()
        if not 0 <= root_position < g.size:
            raise Desync(f"broadcast root {root_position} outside group of {g.size}")
        parts = self._exchange(g, "broadcast", buf, root=root_position)
        n = buf.size
        if g.my_position == root_position:
            self.counters.charge("broadcast", (g.size - 1) * n, 0, calls)
        else:
            self.counters.charge("broadcast", 0, n, calls)
        return np.array(parts[root_position], copy=True)

    def reduce(self, g, root_position: int, buf: np.ndarray, op: str = "sum", calls: int = 1):
        """Sum onto the root member; other members get ``None``."""
        g = self._as_group(g)
        buf = np.asarray(buf)
        if g.size == 1:
            return buf.copy()
        parts = self._exchange(g, "reduce", buf, root=root_position, op=op)
        n = buf.size
        if g.my_position == root_position:
            self.counters.charge("reduce", 0, (g.size - 1) * n, calls)
            return _reduce(parts, op)
        self.counters.charge("reduce", n, 0, calls)
        return None

    def all_gather(self, g, shard: np.ndarray, axis: int = 0, calls: int = 1) -> np.ndarray:
        g = self._as_group(g)
        shard = np.asarray(shard)
        if g.size == 1:
            return shard.copy()
        parts = self._exchange(g, "all_gather", shard)
        n = shard.size * (g.size - 1)
        self.counters.charge("all_gather", n, n, calls)
        return np.concatenate(parts, axis=axis)

    def reduce_scatter(
        self, g, full: np.ndarray, op: str = "sum", axis: int = 0, calls: int = 1
    ) -> np.ndarray:
        g = self._as_group(g)
        full = np.asarray(full)
        if full.ndim == 0 or full.shape[axis] % g.size:
            raise LengthMismatch(
                f"reduce_scatter length {full.shape} not divisible by group size {g.size}"
            )
        if g.size == 1:
            return full.copy()
        parts = self._exchange(g, "reduce_scatter", full, op=op)
        chunk = full.shape[axis] // g.size
        sl = [slice(None)] * full.ndim
        sl[axis] = slice(g.my_position * chunk, (g.my_position + 1) * chunk)
        sl = tuple(sl)
        n = (full.size // g.size) * (g.size - 1)
        self.counters.charge("reduce_scatter", n, n, calls)
        return _reduce([q[sl] for q in parts], op)

    def all_reduce(self, g, buf: np.ndarray, op: str = "sum", calls: int = 1) -> np.ndarray:
        g = self._as_group(g)
        buf = np.asarray(buf)
        if g.size == 1:
            return buf.copy()
        parts = self._exchange(g, "all_reduce", buf, op=op)
        n = buf.size * (g.size - 1)
        self.counters.charge("all_reduce", n, n, calls)
        return _reduce(parts, op)

    def barrier(self) -> None:
        g = self.world()
        if g.size > 1:
            self._exchange(g, "barrier", np.empty(0))

    def reset_counters(self) -> None:
        """Collective over all ranks: zero every rank's counters."""
        self.barrier()
        self.transport._counters[self.rank] = CostCounters()
        self.barrier()


def _reduce(parts: Sequence[np.ndarray], op: str) -> np.ndarray:
    acc = np.array(parts[0], copy=True)
    if op == "sum":
        for q in parts[1:]:
            acc += q
    elif op == "max":
        for q in parts[1:]:
            np.maximum(acc, q, out=acc)
    else:
        raise ValueError(f"unsupported reduction {op!r}")
    return acc


def run_spmd(
    fn: Callable[[Endpoint], Any],
    topo: CubeTopology | None = None,
    *,
    schedule: str = "threads",
    transport: Transport | None = None,
) -> list[Any]:
    """Run ``fn(endpoint)`` on every rank and return the per-rank results."""
    if transport is None:
        if topo is None:
            raise ValueError("need a topology or a transport")
        transport = Transport(topo, schedule)
    P = transport.topo.P
    if P == 1:
        return [fn(transport.endpoint(0))]

    results: list[Any] = [None] * P
    errors: list[BaseException | None] = [None] * P

    def worker(rank: int) -> None:
        try:
            transport._enter(rank)
            results[rank] = fn(transport.endpoint(rank))
        except BaseException as exc:  # noqa: BLE001 - re-raised on the driver
            errors[rank] = exc
            transport._fail(exc)
        finally:
            transport._exit(rank)

    threads = [threading.Thread(target=worker, args=(r,), daemon=True) for r in range(P)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    real = [e for e in errors if e is not None and not isinstance(e, Aborted)]
    if real:
        raise real[0]
    if transport._error is not None:
        raise transport._error
    aborted = [e for e in errors if e is not None]
    if aborted:
        raise aborted[0]
    return results
