"""The verification suite behind ``cube3d verify``.

Every check runs the distributed code on a simulated cube and compares it
with a serial oracle, a finite-difference estimate or the analytic cost
model.  Reports contain no timings, so identical flags give identical
reports under either scheduler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .collectives import Transport, run_spmd
from .costs import predict_costs, predict_layer_costs
from .gradcheck import finite_diff, rel_err, sample_indices
from .ops3d import (
    BACKWARD,
    FORWARD,
    add_vec_bwd,
    add_vec_fwd,
    mul_vec_bwd,
    mul_vec_fwd,
    operand_layouts,
)
from .reference import serial_matmul, transformer_reference
from .sharding import (
    DEFAULT_DIRECTIONS,
    collect,
    collect_vector,
    layout_for,
    partition,
    partition_vector,
)
from .topology import CubeTopology

DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass(frozen=True)
class VerifyConfig:
    p: int = 2
    batch: int = 2
    seq: int = 8
    hidden: int = 16
    heads: int = 2
    layers: int = 1
    seed: int = 0
    dtype: str = "f64"
    schedule: str = "threads"
    fd_samples: int = 4

    def transformer(self) -> L.TransformerConfig:
        return L.TransformerConfig(self.batch, self.seq, self.heads, self.hidden, self.p,
                                   self.layers).validate()


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f" {self.detail}" if self.detail else "")


def _err_check(name: str, err: float, tol: float) -> CheckResult:
    return CheckResult(name, bool(err <= tol), f"rel_err={err:.3e} tol={tol:.0e}")


def _eq_check(name: str, got, want) -> CheckResult:
    return CheckResult(name, got == want, f"measured={got} predicted={want}")


# -- distributed runs ----------------------------------------------------------


@dataclass
class TransformerRun:
    y: np.ndarray
    dx: np.ndarray | None
    grads: list[L.LayerParams] | None
    forward_received: int
    backward_received: int
    forward_macs: int
    backward_macs: int
    groups: list[tuple[int, int]] = field(default_factory=list)  # (before, after) per layer
    activation_sizes: set[int] = field(default_factory=set)
    shard_sizes: dict[str, set[int]] = field(default_factory=dict)


def simulate_transformer(cfg: L.TransformerConfig, params: list[L.LayerParams], x: np.ndarray,
                         dout: np.ndarray | None = None, *, schedule: str = "threads",
                         dtype=np.float64) -> TransformerRun:
    """Shard, run forward (and backward) on ``cfg.p**3`` simulated ranks, collect."""
    topo = CubeTopology(cfg.p)
    cast = [_cast_params(lp, dtype) for lp in params]
    shards = [L.shard_layer_params(lp, cfg, topo) for lp in cast]
    xs = L.partition_activation(x.astype(dtype), topo)
    ds = L.partition_activation(dout.astype(dtype), topo) if dout is not None else None
    tr = Transport(topo, schedule)

    def rank_fn(comm):
        r = comm.rank
        gs = L.GroupState(0)
        lps = [s[r] for s in shards]
        sizes = {xs[r].local.size}
        groups = []
        act, saved = xs[r], []
        for lp in lps:
            before = gs.input_group
            act, s = L.transformer_layer_fwd(comm, act, lp, cfg, gs)
            saved.append(s)
            groups.append((before, gs.input_group))
            sizes.add(act.local.size)
        fwd = comm.counters.snapshot()
        if ds is None:
            return act, None, None, fwd, groups, sizes
        dx, grads = L.transformer_bwd(comm, ds[r], saved, lps, cfg, gs)
        sizes.add(dx.local.size)
        return act, dx, grads, fwd, groups, sizes

    out = run_spmd(rank_fn, transport=tr)
    total = tr.total_counters()
    fwd_recv = sum(o[3].elements_received for o in out)
    fwd_macs = sum(o[3].multiply_adds for o in out)
    shard_sizes: dict[str, set[int]] = {}
    for layer_shards in shards:
        for lp in layer_shards:
            for name, v in L.param_items(lp):
                size = v.local.size if hasattr(v, "local") else (v.shard.size if v.is_holder else None)
                if size is not None:
                    shard_sizes.setdefault(name, set()).add(size)
    run = TransformerRun(
        y=L.collect_activation([o[0] for o in out]),
        dx=L.collect_activation([o[1] for o in out]) if ds is not None else None,
        grads=None,
        forward_received=fwd_recv,
        backward_received=total.elements_received - fwd_recv,
        forward_macs=fwd_macs,
        backward_macs=total.multiply_adds - fwd_macs,
        groups=out[0][4],
        activation_sizes=set().union(*(o[5] for o in out)),
        shard_sizes=shard_sizes,
    )
    if ds is not None:
        run.grads = [L.collect_layer_params([o[2][i] for o in out], cfg) for i in range(len(params))]
    return run


def _cast_params(lp: L.LayerParams, dtype) -> L.LayerParams:
    vals = [v.astype(dtype) for _, v in L.param_items(lp)]
    return _rebuild(vals)


def _rebuild(vals) -> L.LayerParams:
    it = iter(vals)
    g = lambda: next(it)  # noqa: E731
    ln1 = L.LayerNormParams(g(), g())
    attn = L.AttentionParams(L.LinearParams(g(), g()), L.LinearParams(g(), g()))
    ln2 = L.LayerNormParams(g(), g())
    mlp = L.MLPParams(L.LinearParams(g(), g()), L.LinearParams(g(), g()))
    return L.LayerParams(ln1, attn, ln2, mlp)


# -- checks --------------------------------------------------------------------


def _form_operands(form, M, N, K, rng):
    """Global operands for the product of an (M x N) and (N x K) logical pair."""
    a = rng.uniform(-1, 1, (N, M) if form == "atb" else (M, N))
    b = rng.uniform(-1, 1, (K, N) if form == "abt" else (N, K))
    return a, b


def check_matmuls(vc: VerifyConfig, rng) -> list[CheckResult]:
    p = vc.p
    q = p * p
    M, N, K = 2 * q, q, 3 * q
    topo = CubeTopology(p)
    dt = DTYPES[vc.dtype]
    tol = 1e-12 if vc.dtype == "f64" else 1e-5
    d = DEFAULT_DIRECTIONS
    out = []
    pred = predict_costs(M, N, K, p)
    for form in ("ab", "abt", "atb"):
        a, b = _form_operands(form, M, N, K, rng)
        c_shape = (M, K)
        dc = rng.uniform(-1, 1, c_shape)
        la, lb, lc = operand_layouts(form, d)
        As = partition(a.astype(dt), la, topo, d)
        Bs = partition(b.astype(dt), lb, topo, d)
        dCs = partition(dc.astype(dt), lc, topo, d.swap_io())
        tr = Transport(topo, vc.schedule)

        def fn(comm, form=form, As=As, Bs=Bs, dCs=dCs):
            r = comm.rank
            C = FORWARD[form](comm, As[r], Bs[r], d)
            snap = comm.counters.snapshot()
            dA, dB = BACKWARD[form](comm, dCs[r], As[r], Bs[r], d)
            return C, dA, dB, snap

        res = run_spmd(fn, transport=tr)
        c = collect([r[0] for r in res])
        out.append(_err_check(f"matmul.{form}.forward", rel_err(c, serial_matmul(a, b, form)), tol))
        if form == "ab":
            want_a, want_b = serial_matmul(dc, b.T), serial_matmul(a.T, dc)
        elif form == "abt":
            want_a, want_b = serial_matmul(dc, b), serial_matmul(dc.T, a)
        else:
            want_a, want_b = serial_matmul(b, dc.T), serial_matmul(a, dc)
        err = max(rel_err(collect([r[1] for r in res]), want_a),
                  rel_err(collect([r[2] for r in res]), want_b))
        out.append(_err_check(f"matmul.{form}.backward", err, tol))
        recv = sorted({r[3].elements_received for r in res})
        macs = sorted({r[3].multiply_adds for r in res})
        out.append(_eq_check(f"matmul.{form}.comm", recv, [pred.per_rank_comm_elems]))
        out.append(_eq_check(f"matmul.{form}.multiply_adds", macs, [pred.per_rank_multiply_adds]))
        mem_total = sorted({As[i].local.size + Bs[i].local.size + res[i][0].local.size
                            for i in range(topo.P)})
        if form == "ab":
            out.append(_eq_check("matmul.ab.memory", mem_total, [pred.per_rank_memory_elems]))
    return out


def check_vectors(vc: VerifyConfig, rng) -> list[CheckResult]:
    p = vc.p
    topo = CubeTopology(p)
    dt = DTYPES[vc.dtype]
    tol = 1e-12 if vc.dtype == "f64" else 1e-5
    M, N = 2 * p * p, 3 * p * p
    out = []
    for kind in ("input", "output"):
        d = DEFAULT_DIRECTIONS if kind == "input" else DEFAULT_DIRECTIONS.swap_io()
        a = rng.uniform(-1, 1, (M, N))
        vec = rng.uniform(-1, 1, N)
        dc = rng.uniform(-1, 1, (M, N))
        As = partition(a.astype(dt), layout_for("input", d), topo, d)
        dCs = partition(dc.astype(dt), layout_for("input", d), topo, d)
        vs = partition_vector(vec.astype(dt), topo)

        def fn(comm, As=As, dCs=dCs, vs=vs):
            r = comm.rank
            add = add_vec_fwd(comm, As[r], vs[r])
            mul = mul_vec_fwd(comm, As[r], vs[r])
            _, db_add = add_vec_bwd(comm, dCs[r], vs[r])
            da_mul, db_mul = mul_vec_bwd(comm, dCs[r], As[r], vs[r])
            return add, mul, db_add, da_mul, db_mul

        res = run_spmd(fn, topo, schedule=vc.schedule)
        fwd = max(rel_err(collect([r[0] for r in res]), a + vec),
                  rel_err(collect([r[1] for r in res]), a * vec))
        bwd = max(rel_err(collect_vector([r[2] for r in res]), dc.sum(axis=0)),
                  rel_err(collect([r[3] for r in res]), dc * vec),
                  rel_err(collect_vector([r[4] for r in res]), (dc * a).sum(axis=0)))
        out.append(_err_check(f"vector.{kind}.forward", fwd, tol))
        out.append(_err_check(f"vector.{kind}.backward", bwd, tol))
    return out


def check_layers(vc: VerifyConfig, rng) -> list[CheckResult]:
    cfg = vc.transformer()
    dt = DTYPES[vc.dtype]
    params = [L.init_layer_params(cfg, rng) for _ in range(cfg.layers)]
    x = rng.uniform(-1, 1, (cfg.b, cfg.s, cfg.h))
    g = rng.uniform(-1, 1, x.shape)
    y_ref, dx_ref, g_ref = transformer_reference(x, params, cfg, g)
    run = simulate_transformer(cfg, params, x, g, schedule=vc.schedule, dtype=dt)
    f64 = vc.dtype == "f64"
    out = [_err_check("layer.forward", rel_err(run.y, y_ref), (1e-10 if cfg.layers == 1 else 1e-9) if f64 else 1e-4)]
    gerr = rel_err(run.dx, dx_ref)
    for got, want in zip(run.grads, g_ref):
        for (_, a), (_, b) in zip(L.param_items(got), L.param_items(want)):
            gerr = max(gerr, rel_err(a, b))
    out.append(_err_check("layer.backward", gerr, 1e-9 if f64 else 1e-3))

    # the oracle's own gradients against central differences (always 64-bit)
    fd_rng = np.random.default_rng(vc.seed + 1)
    worst = 0.0
    x_fd = x.copy()

    def ref_loss():
        return float(np.sum(transformer_reference(x_fd, params, cfg)[0] * g))

    idx = sample_indices(x_fd.shape, vc.fd_samples, fd_rng)
    est = finite_diff(ref_loss, x_fd, 1e-5, idx)
    worst = max(worst, _sampled_err(est, dx_ref, idx))
    for li, lp in enumerate(params):
        for (name, v), (_, gv) in zip(L.param_items(lp), L.param_items(g_ref[li])):
            idx = sample_indices(v.shape, vc.fd_samples, fd_rng)
            est = finite_diff(ref_loss, v, 1e-5, idx)
            worst = max(worst, _sampled_err(est, gv, idx))
    out.append(_err_check("layer.finite_difference", worst, 1e-5))

    groups_ok = all(b == a for b, a in run.groups)
    out.append(CheckResult("layer.group_index", groups_ok,
                           "groups=" + ",".join(f"{b}->{a}" for b, a in run.groups)))
    balanced = len(run.activation_sizes) == 1 and all(len(s) == 1 for s in run.shard_sizes.values())
    out.append(CheckResult("layer.balance", balanced,
                           f"activation_elems={sorted(run.activation_sizes)}"))
    lc = predict_layer_costs(cfg)
    out.append(_eq_check("layer.forward_comm", run.forward_received, lc.forward.comm_elems))
    out.append(_eq_check("layer.backward_comm", run.backward_received, lc.backward.comm_elems))
    out.append(_eq_check("layer.multiply_adds", run.forward_macs + run.backward_macs,
                         lc.forward.multiply_adds + lc.backward.multiply_adds))
    return out


def _sampled_err(est, grad, idx) -> float:
    a = np.array([est[i] for i in idx])
    b = np.array([grad[i] for i in idx])
    scale = max(np.max(np.abs(grad)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def run_verify(vc: VerifyConfig) -> list[CheckResult]:
    vc.transformer()
    rng = np.random.default_rng(vc.seed)
    return check_matmuls(vc, rng) + check_vectors(vc, rng) + check_layers(vc, rng)


def format_report(vc: VerifyConfig, results: list[CheckResult]) -> str:
    head = (f"verify p={vc.p} ranks={vc.p ** 3} batch={vc.batch} seq={vc.seq} hidden={vc.hidden} "
            f"heads={vc.heads} layers={vc.layers} seed={vc.seed} dtype={vc.dtype}")
    passed = sum(r.passed for r in results)
    lines = [head] + [r.line() for r in results] + [f"{passed}/{len(results)} checks passed"]
    return "\n".join(lines) + "\n"
