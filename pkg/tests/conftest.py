import numpy as np
import pytest

from cube3d import layers as L
from cube3d.collectives import Transport, run_spmd
from cube3d.ops3d import BACKWARD, FORWARD, add_vec_bwd, add_vec_fwd, mul_vec_bwd, mul_vec_fwd, operand_layouts
from cube3d.sharding import DEFAULT_DIRECTIONS, collect, collect_vector, layout_for, partition, partition_vector
from cube3d.topology import CubeTopology

D = DEFAULT_DIRECTIONS

# criterion number -> PASS/FAIL line, filled by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


def spmd(p, fn, schedule="threads"):
    """Run ``fn(comm)`` on a fresh p-cube; return (results, transport)."""
    tr = Transport(CubeTopology(p), schedule)
    return run_spmd(fn, transport=tr), tr


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["threads", "lockstep"])
def schedule(request):
    return request.param


def run_form(form, a, b, p, dc=None, d=D, schedule="threads"):
    topo = CubeTopology(p)
    la, lb, lc = operand_layouts(form, d)
    As, Bs = partition(a, la, topo, d), partition(b, lb, topo, d)
    dCs = partition(dc, lc, topo, d.swap_io()) if dc is not None else None

    def fn(comm):
        r = comm.rank
        C = FORWARD[form](comm, As[r], Bs[r], d)
        fwd = comm.counters.snapshot()
        grads = BACKWARD[form](comm, dCs[r], As[r], Bs[r], d) if dCs is not None else None
        return C, fwd, grads

    out, tr = spmd(p, fn, schedule)
    C = collect([o[0] for o in out])
    grads = None
    if dc is not None:
        grads = (collect([o[2][0] for o in out]), collect([o[2][1] for o in out]))
    return C, [o[1] for o in out], grads, out


def run_vec(a, v, dc, p, kind="input"):
    topo = CubeTopology(p)
    d = D if kind == "input" else D.swap_io()
    As = partition(a, layout_for("input", d), topo, d)
    dCs = partition(dc, layout_for("input", d), topo, d)
    vs = partition_vector(v, topo)

    def fn(comm):
        r = comm.rank
        add = add_vec_fwd(comm, As[r], vs[r])
        mul = mul_vec_fwd(comm, As[r], vs[r])
        da_add, db_add = add_vec_bwd(comm, dCs[r], vs[r])
        da_mul, db_mul = mul_vec_bwd(comm, dCs[r], As[r], vs[r])
        return add, mul, da_add, db_add, da_mul, db_mul

    out, tr = spmd(p, fn)
    cm = lambda i: collect([o[i] for o in out])  # noqa: E731
    cv = lambda i: collect_vector([o[i] for o in out])  # noqa: E731
    return cm(0), cm(1), cm(2), cv(3), cm(4), cv(5), tr


def run_block(p, x, shards, fwd, bwd=None, dout=None, group=0):
    """Run one block on every rank; returns (y, groups, dx, per-rank grads, transport)."""
    topo = CubeTopology(p)
    xs = L.partition_activation(x, topo, group)

    def fn(comm):
        r = comm.rank
        gs = L.GroupState(group)
        y, saved = fwd(comm, xs[r], shards[r], gs)
        after = gs.input_group
        if bwd is None:
            return y, after, None, None
        dy = L.partition_activation(dout, topo, y.group)[r]
        dx, *grads = bwd(comm, dy, saved, shards[r], gs)
        return y, (after, gs.input_group), dx, grads

    out, tr = spmd(p, fn)
    y = L.collect_activation([o[0] for o in out])
    dx = L.collect_activation([o[2] for o in out]) if bwd else None
    return y, out[0][1], dx, [o[3] for o in out], tr


def linear_block(comm, x, lp, gs):
    return L.linear3d_fwd(comm, x, lp, gs)


def linear_bwd(comm, dy, saved, lp, gs):
    return L.linear3d_bwd(comm, dy, saved, lp, gs)


def ln_block(comm, x, lp, gs):
    return L.layernorm3d_fwd(comm, x, lp, 1e-5)


def ln_bwd(comm, dy, saved, lp, gs):
    return L.layernorm3d_bwd(comm, dy, saved, lp)


def attn_block(cfg):
    return (lambda comm, x, ap, gs: L.attention_fwd(comm, x, ap, cfg, gs),
            lambda comm, dy, saved, ap, gs: L.attention_bwd(comm, dy, saved, ap, cfg, gs))


def mlp_block(cfg):
    return (lambda comm, x, mp, gs: L.mlp_fwd(comm, x, mp, cfg, gs),
            lambda comm, dy, saved, mp, gs: L.mlp_bwd(comm, dy, saved, mp, cfg, gs))


def uniform(rng, *shape):
    return rng.uniform(-0.1, 0.1, size=shape)
