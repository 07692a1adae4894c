import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cube3d.collectives import CostCounters, Transport, run_spmd
from cube3d.errors import Desync, LengthMismatch
from cube3d.topology import X, Y, Z, CubeTopology

from conftest import spmd


def test_broadcast_p2(schedule):
    def fn(c):
        g = c.group(Y)
        buf = np.array([1.0, 2.0]) if g.my_position == 0 else np.zeros(2)
        return c.broadcast(g, 0, buf)

    out, tr = spmd(2, fn, schedule)
    for r in out:
        assert r.tolist() == [1.0, 2.0]
    for rank in range(8):
        cnt = tr.counters(rank)
        pos = tr.topo.coords_of(rank)[Y]
        assert (cnt.elements_sent, cnt.elements_received) == ((2, 0) if pos == 0 else (0, 2))


def test_broadcast_p3_root_charge():
    def fn(c):
        return c.broadcast(c.group(X), 1, np.full(4, float(c.coords[X])))

    out, tr = spmd(3, fn)
    assert all(np.all(o == 1.0) for o in out)
    root = tr.topo.rank_of((1, 0, 0))
    assert tr.counters(root).elements_sent == 8


def test_p1_collectives_are_free_identities():
    def fn(c):
        g = c.group(Z)
        b = np.array([3.0, 4.0])
        return [c.broadcast(g, 0, b), c.all_gather(g, b), c.reduce_scatter(g, b),
                c.all_reduce(g, b), c.all_reduce(g, b, op="max")]

    (res,), tr = spmd(1, fn)
    for r in res:
        assert r.tolist() == [3.0, 4.0]
    cnt = tr.counters(0)
    assert cnt.elements_sent == cnt.elements_received == 0
    assert not any(cnt.calls.values())


def test_all_gather_p2():
    def fn(c):
        g = c.group(Z)
        return c.all_gather(g, np.array([1.0, 2.0]) + 2 * g.my_position)

    out, tr = spmd(2, fn)
    assert all(o.tolist() == [1, 2, 3, 4] for o in out)
    assert {tr.counters(r).elements_received for r in range(8)} == {2}


def test_all_gather_counter_example():
    # s = MN / p^3 with M = N = 8: each member receives (p-1) s = 8
    def fn(c):
        return c.all_gather(c.group(Y), np.zeros(64 // 8))

    _, tr = spmd(2, fn)
    assert {tr.counters(r).elements_received for r in range(8)} == {8}


def test_reduce_scatter_p2(schedule):
    def fn(c):
        g = c.group(X)
        full = np.array([1.0, 2, 3, 4]) if g.my_position == 0 else np.array([10.0, 20, 30, 40])
        return g.my_position, c.reduce_scatter(g, full)

    out, _ = spmd(2, fn, schedule)
    for pos, v in out:
        assert v.tolist() == ([11, 22] if pos == 0 else [33, 44])


def test_reduce_scatter_zeros_and_bad_length():
    out, _ = spmd(2, lambda c: c.reduce_scatter(c.group(Y), np.zeros(6)))
    assert all(not o.any() for o in out)
    with pytest.raises(LengthMismatch):
        spmd(2, lambda c: c.reduce_scatter(c.group(Y), np.zeros(5)))


def test_all_reduce_sum_and_max():
    def fn(c):
        g = c.group(Y)
        a = [np.array([1.0, 2.0]), np.array([3.0, 4.0])][g.my_position]
        m = [np.array([1.0, 9.0]), np.array([3.0, 4.0])][g.my_position]
        return c.all_reduce(g, a), c.all_reduce(g, m, op="max")

    out, _ = spmd(2, fn)
    for s, m in out:
        assert s.tolist() == [4, 6] and m.tolist() == [3, 9]


def test_reduce_onto_root():
    def fn(c):
        g = c.group(Z)
        return g.my_position, c.reduce(g, 1, np.array([1.0 + g.my_position]))

    out, tr = spmd(2, fn)
    for pos, v in out:
        assert (v is None) if pos == 0 else (v.tolist() == [3.0])
    tot = tr.total_counters()
    assert tot.elements_sent == tot.elements_received == 4


def test_mismatched_lengths_raise():
    def fn(c):
        return c.all_gather(c.group(X), np.zeros(2 + c.coords[X]))

    with pytest.raises(LengthMismatch):
        spmd(2, fn)


@pytest.mark.parametrize("schedule", ["threads", "lockstep"])
def test_desync_on_different_collectives(schedule):
    def fn(c):
        g = c.group(Y)
        if c.coords[Y] == 0:
            return c.all_gather(g, np.zeros(2))
        return c.all_reduce(g, np.zeros(2))

    with pytest.raises(Desync):
        spmd(2, fn, schedule)


def test_deadlock_is_reported_in_lockstep():
    def fn(c):
        if c.rank == 0:
            return None
        return c.all_reduce(c.group(X), np.zeros(1))

    with pytest.raises(Desync):
        spmd(2, fn, "lockstep")


def test_missing_peer_times_out_with_threads():
    tr = Transport(CubeTopology(2), "threads", timeout=0.5)

    def fn(c):
        if c.rank == 0:
            return None
        return c.all_reduce(c.group(X), np.zeros(1))

    with pytest.raises(Desync):
        run_spmd(fn, transport=tr)


def test_reset_counters_is_collective():
    def fn(c):
        c.all_gather(c.group(X), np.zeros(3))
        c.reset_counters()
        return c.counters.snapshot()

    out, _ = spmd(2, fn)
    for cnt in out:
        assert cnt.elements_sent == cnt.elements_received == 0


def test_counter_addition():
    a, b = CostCounters(), CostCounters()
    a.charge("all_gather", 3, 4)
    b.charge("all_gather", 1, 1, calls=2)
    b.multiply_adds = 5
    s = a + b
    assert (s.elements_sent, s.elements_received, s.multiply_adds) == (4, 5, 5)
    assert s.calls["all_gather"] == 3


def _mixed_program(seed):
    def fn(c):
        rng = np.random.default_rng(seed * 1000 + c.rank)
        x = rng.standard_normal(12)
        x = c.all_gather(c.group(Y), x)
        x = c.reduce_scatter(c.group(Z), x * 1.0001)
        x = c.all_reduce(c.group(X), x)
        root = c.broadcast(c.group(Z), 1, x)
        return np.concatenate([x, root])

    return fn


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_schedules_bitwise_identical(seed):
    a, ta = spmd(2, _mixed_program(seed), "threads")
    b, tb = spmd(2, _mixed_program(seed), "lockstep")
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()
    assert [c.as_dict() for c in ta.all_counters()] == [c.as_dict() for c in tb.all_counters()]


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 3), st.sampled_from([X, Y, Z]), st.integers(1, 5))
def test_sent_equals_received(p, axis, n):
    def fn(c):
        g = c.group(axis)
        c.broadcast(g, p - 1, np.ones(n))
        c.all_gather(g, np.ones(n))
        c.reduce_scatter(g, np.ones(n * p))
        c.all_reduce(g, np.ones(n))
        c.reduce(g, 0, np.ones(n))

    _, tr = spmd(p, fn)
    tot = tr.total_counters()
    assert tot.elements_sent == tot.elements_received
    for k in tot.sent_by_kind:
        assert tot.sent_by_kind[k] == tot.received_by_kind[k]


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 3), st.integers(0, 1000))
def test_reduce_scatter_inverts_zero_padded_gather(p, seed):
    def fn(c):
        g = c.group(Z)
        shard = np.random.default_rng(seed + c.rank).standard_normal(3)
        full = c.all_gather(g, shard)
        mine = full if g.my_position == 0 else np.zeros_like(full)
        return shard, c.reduce_scatter(g, mine), g

    out, _ = spmd(p, fn)
    by_rank = {o[2].members[o[2].my_position]: o[0] for o in out}
    for shard, back, g in out:
        # member 0's copy of the gathered buffer scatters every shard home
        assert np.array_equal(back, shard)
        assert np.array_equal(back, by_rank[g.members[g.my_position]])


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 3), st.integers(0, 1000))
def test_all_reduce_matches_gather_then_sum(p, seed):
    def fn(c):
        g = c.group(Y)
        v = np.random.default_rng(seed + c.rank).standard_normal(4)
        gathered = c.all_gather(g, v).reshape(p, 4)
        acc = gathered[0].copy()
        for row in gathered[1:]:
            acc += row
        return c.all_reduce(g, v), acc

    out, _ = spmd(p, fn)
    for a, b in out:
        assert np.array_equal(a, b)
