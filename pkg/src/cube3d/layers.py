"""Transformer building blocks on the processor cube.

Activations are ``[b, s, h]`` tensors.  Rank ``c`` holds the block
``[b/p, s/p, h/p]`` with the batch split along the weight axis (x), the
sequence along the current input axis and the hidden dim along the current
output axis.  A group index ``g`` in {0, 1} names which of the two plane
axes (y, z) currently plays the input role; every linear layer flips it.

Inside self-attention the per-head scores and context products run on the
(seq axis, hidden axis) plane of each batch slice: keys are gathered along
the seq axis, head-dim partial scores are reduce-scattered along the hidden
axis, so the softmax sees its keys split across that axis.  This needs
``(h / n) % p == 0``: the fused QKV weight is stored so that each rank's
column block carries a ``1/p`` slice of every head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import erf

from . import kernels, matfile
from .collectives import Endpoint
from .errors import ConfigInvalid, GroupMismatch, HeadsIndivisible, ShapeMismatch
from .ops3d import (
    add_vec_bwd,
    add_vec_fwd,
    expand_vector,
    matmul_ab_bwd,
    matmul_ab_fwd,
    mul_vec_bwd,
    mul_vec_fwd,
)
from .sharding import (
    DirectionTriple,
    ShardedMatrix,
    collect,
    collect_vector,
    layout_for,
    partition,
    partition_vector,
)
from .topology import X, Y, Z, Coords, CubeTopology

PLANE = (Y, Z)


def directions_for(group: int) -> DirectionTriple:
    if group not in (0, 1):
        raise GroupMismatch(f"group index must be 0 or 1, got {group}")
    return DirectionTriple(PLANE[group], X, PLANE[1 - group])


@dataclass
class GroupState:
    input_group: int = 0

    def toggle(self) -> None:
        self.input_group = 1 - self.input_group

    @property
    def directions(self) -> DirectionTriple:
        return directions_for(self.input_group)


@dataclass(frozen=True)
class TransformerConfig:
    b: int = 2
    s: int = 8
    n: int = 2
    h: int = 16
    p: int = 2
    layers: int = 1
    eps: float = 1e-5

    def validate(self) -> TransformerConfig:
        p = self.p
        if min(self.b, self.s, self.n, self.h, self.p, self.layers) < 1:
            raise ConfigInvalid(f"all sizes must be positive: {self}")
        for name, v, dv in (("b", self.b, p), ("s", self.s, p), ("h", self.h, p * p),
                            ("4h", 4 * self.h, p * p)):
            if v % dv:
                raise ConfigInvalid(f"{name}={v} must be divisible by {dv}")
        if self.n % p or self.h % self.n or (self.h // self.n) % p:
            raise HeadsIndivisible(
                f"need n % p == 0 and head dim (h/n) divisible by p; got n={self.n}, "
                f"h={self.h}, p={p}"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.h // self.n

    @property
    def tokens(self) -> int:
        return self.b * self.s


# -- activations ---------------------------------------------------------------


@dataclass
class Activation3D:
    local: np.ndarray  # [b/p, s/p, h/p]
    group: int
    b: int
    s: int
    h: int
    coords: Coords
    p: int
    rank: int = -1

    @property
    def directions(self) -> DirectionTriple:
        return directions_for(self.group)

    def as_matrix(self) -> ShardedMatrix:
        d = self.directions
        bl, sl, hl = self.local.shape
        return ShardedMatrix(
            (self.b * self.s, self.h),
            layout_for("input", d),
            self.local.reshape(bl * sl, hl),
            self.coords,
            self.p,
            d,
            self.rank,
        )

    def with_local(self, local: np.ndarray, **changes) -> Activation3D:
        return replace(self, local=local, **changes)

    @classmethod
    def from_matrix(cls, sm: ShardedMatrix, group: int, b: int, s: int) -> Activation3D:
        d = directions_for(group)
        if sm.layout != layout_for("input", d):
            raise GroupMismatch(f"matrix layout {sm.layout} is not the group-{group} input layout")
        p = sm.p
        h = sm.global_shape[1]
        local = sm.local.reshape(b // p, s // p, h // p)
        return cls(local, group, b, s, h, sm.coords, p, sm.rank)


def activation_slices(c: Coords, group: int, b: int, s: int, h: int, p: int):
    d = directions_for(group)
    bb, ss, hh = b // p, s // p, h // p
    return (
        slice(c[X] * bb, (c[X] + 1) * bb),
        slice(c[d.input_axis] * ss, (c[d.input_axis] + 1) * ss),
        slice(c[d.output_axis] * hh, (c[d.output_axis] + 1) * hh),
    )


def partition_activation(x: np.ndarray, topo: CubeTopology, group: int = 0) -> list[Activation3D]:
    b, s, h = x.shape
    p = topo.p
    for name, v, dv in (("b", b, p), ("s", s, p), ("h", h, p)):
        if v % dv:
            raise ShapeMismatch(f"activation {name}={v} not divisible by {dv}")
    out = []
    for r in range(topo.P):
        c = topo.coords_of(r)
        sl = activation_slices(c, group, b, s, h, p)
        out.append(Activation3D(np.array(x[sl], copy=True), group, b, s, h, c, p, r))
    return out


def collect_activation(acts: list[Activation3D]) -> np.ndarray:
    a0 = acts[0]
    if len(acts) != a0.p**3 or any(a.group != a0.group for a in acts):
        raise ShapeMismatch("inconsistent activation family")
    out = np.empty((a0.b, a0.s, a0.h), dtype=a0.local.dtype)
    for a in acts:
        out[activation_slices(a.coords, a.group, a.b, a.s, a.h, a.p)] = a.local
    return out


# -- parameters ----------------------------------------------------------------


@dataclass
class LinearParams:
    w: Any  # global ndarray (h_in, h_out) or ShardedMatrix
    b: Any  # global ndarray (h_out,) or DiagonalVector


@dataclass
class LayerNormParams:
    gamma: Any
    beta: Any


@dataclass
class AttentionParams:
    qkv: LinearParams
    out: LinearParams


@dataclass
class MLPParams:
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class LayerParams:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    mlp: MLPParams


def init_layer_params(cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float64,
                      scale: float = 0.1) -> LayerParams:
    """Uniform in [-scale, scale]; layer-norm gains start near 1."""
    h = cfg.h

    def u(*shape):
        return rng.uniform(-scale, scale, size=shape).astype(dtype)

    return LayerParams(
        ln1=LayerNormParams(1 + u(h), u(h)),
        attn=AttentionParams(LinearParams(u(h, 3 * h), u(3 * h)), LinearParams(u(h, h), u(h))),
        ln2=LayerNormParams(1 + u(h), u(h)),
        mlp=MLPParams(LinearParams(u(h, 4 * h), u(4 * h)), LinearParams(u(4 * h, h), u(h))),
    )


def qkv_storage_order(h: int, n: int, p: int) -> np.ndarray:
    """Column permutation for the fused QKV weight.

    Stored column ``k`` holds canonical column ``order[k]``; canonical columns
    are ``[Q | K | V]`` with heads contiguous.  Stored block ``e`` (one per
    hidden-axis coordinate) holds, for q, k and v and every head, that head's
    ``e``-th slice of ``h / (n * p)`` columns.
    """
    dh = h // n
    t = dh // p
    idx = np.arange(3 * h).reshape(3, n, p, t)  # part, head, slice, offset
    return idx.transpose(2, 0, 1, 3).reshape(-1)


def head_storage_order(h: int, n: int, p: int) -> np.ndarray:
    """Row permutation of the output projection matching attention's context layout."""
    dh = h // n
    idx = np.arange(h).reshape(n, p, dh // p)
    return idx.transpose(1, 0, 2).reshape(-1)


def attention_to_storage(ap: AttentionParams, cfg: TransformerConfig) -> AttentionParams:
    qo = qkv_storage_order(cfg.h, cfg.n, cfg.p)
    ho = head_storage_order(cfg.h, cfg.n, cfg.p)
    return AttentionParams(
        LinearParams(ap.qkv.w[:, qo], ap.qkv.b[qo]),
        LinearParams(ap.out.w[ho, :], ap.out.b),
    )


def attention_from_storage(ap: AttentionParams, cfg: TransformerConfig) -> AttentionParams:
    qo = qkv_storage_order(cfg.h, cfg.n, cfg.p)
    ho = head_storage_order(cfg.h, cfg.n, cfg.p)
    qkv_w = np.empty_like(ap.qkv.w)
    qkv_w[:, qo] = ap.qkv.w
    qkv_b = np.empty_like(ap.qkv.b)
    qkv_b[qo] = ap.qkv.b
    out_w = np.empty_like(ap.out.w)
    out_w[ho, :] = ap.out.w
    return AttentionParams(LinearParams(qkv_w, qkv_b), LinearParams(out_w, ap.out.b))


def shard_linear(lp: LinearParams, topo: CubeTopology, group: int = 0) -> list[LinearParams]:
    """Weight and bias shards for a linear layer whose input is in ``group``."""
    ws = partition(lp.w, "weight", topo, directions_for(group))
    bs = partition_vector(lp.b, topo)
    return [LinearParams(w, b) for w, b in zip(ws, bs)]


def shard_layernorm(lp: LayerNormParams, topo: CubeTopology) -> list[LayerNormParams]:
    gs = partition_vector(lp.gamma, topo)
    bs = partition_vector(lp.beta, topo)
    return [LayerNormParams(g, b) for g, b in zip(gs, bs)]


def shard_attention(ap: AttentionParams, cfg: TransformerConfig, topo: CubeTopology,
                    group: int = 0) -> list[AttentionParams]:
    st = attention_to_storage(ap, cfg)
    qkv = shard_linear(st.qkv, topo, group)
    out = shard_linear(st.out, topo, 1 - group)
    return [AttentionParams(a, b) for a, b in zip(qkv, out)]


def shard_mlp(mp: MLPParams, topo: CubeTopology, group: int = 0) -> list[MLPParams]:
    fc1 = shard_linear(mp.fc1, topo, group)
    fc2 = shard_linear(mp.fc2, topo, 1 - group)
    return [MLPParams(a, b) for a, b in zip(fc1, fc2)]


def collect_linear(per_rank: list[LinearParams]) -> LinearParams:
    return LinearParams(collect([r.w for r in per_rank]), collect_vector([r.b for r in per_rank]))


def collect_layernorm(per_rank: list[LayerNormParams]) -> LayerNormParams:
    return LayerNormParams(collect_vector([r.gamma for r in per_rank]),
                           collect_vector([r.beta for r in per_rank]))


def collect_attention(per_rank: list[AttentionParams], cfg: TransformerConfig) -> AttentionParams:
    st = AttentionParams(collect_linear([r.qkv for r in per_rank]),
                         collect_linear([r.out for r in per_rank]))
    return attention_from_storage(st, cfg)


def collect_mlp(per_rank: list[MLPParams]) -> MLPParams:
    return MLPParams(collect_linear([r.fc1 for r in per_rank]),
                     collect_linear([r.fc2 for r in per_rank]))


def shard_layer_params(params: LayerParams, cfg: TransformerConfig, topo: CubeTopology,
                       group: int = 0) -> list[LayerParams]:
    """Global (canonical) parameters -> one LayerParams of shards per rank."""
    ln1 = shard_layernorm(params.ln1, topo)
    ln2 = shard_layernorm(params.ln2, topo)
    attn = shard_attention(params.attn, cfg, topo, group)
    mlp = shard_mlp(params.mlp, topo, group)
    return [LayerParams(ln1[r], attn[r], ln2[r], mlp[r]) for r in range(topo.P)]


def collect_layer_params(per_rank: list[LayerParams], cfg: TransformerConfig) -> LayerParams:
    """Inverse of :func:`shard_layer_params` (also used for gradients)."""
    return LayerParams(
        collect_layernorm([r.ln1 for r in per_rank]),
        collect_attention([r.attn for r in per_rank], cfg),
        collect_layernorm([r.ln2 for r in per_rank]),
        collect_mlp([r.mlp for r in per_rank]),
    )


def param_items(lp: LayerParams):
    """(name, value) pairs in a fixed order."""
    yield "ln1.gamma", lp.ln1.gamma
    yield "ln1.beta", lp.ln1.beta
    yield "attn.qkv.w", lp.attn.qkv.w
    yield "attn.qkv.b", lp.attn.qkv.b
    yield "attn.out.w", lp.attn.out.w
    yield "attn.out.b", lp.attn.out.b
    yield "ln2.gamma", lp.ln2.gamma
    yield "ln2.beta", lp.ln2.beta
    yield "mlp.fc1.w", lp.mlp.fc1.w
    yield "mlp.fc1.b", lp.mlp.fc1.b
    yield "mlp.fc2.w", lp.mlp.fc2.w
    yield "mlp.fc2.b", lp.mlp.fc2.b


# -- linear --------------------------------------------------------------------


def linear3d_fwd(comm: Endpoint, x: Activation3D, params: LinearParams, gs: GroupState):
    if x.group != gs.input_group:
        raise GroupMismatch(f"activation in group {x.group}, state expects {gs.input_group}")
    d = directions_for(x.group)
    xm = x.as_matrix()
    if params.w.global_shape[0] != x.h:
        raise ShapeMismatch(f"weight {params.w.global_shape} does not accept hidden size {x.h}")
    y = matmul_ab_fwd(comm, xm, params.w, d)
    y = add_vec_fwd(comm, y, params.b)
    gs.toggle()
    out = Activation3D.from_matrix(y, gs.input_group, x.b, x.s)
    return out, {"x": xm, "d": d}


def linear3d_bwd(comm: Endpoint, dy: Activation3D, saved, params: LinearParams, gs: GroupState):
    if dy.group != gs.input_group:
        raise GroupMismatch(f"gradient in group {dy.group}, state expects {gs.input_group}")
    dym = dy.as_matrix()
    _, db = add_vec_bwd(comm, dym, params.b)
    dxm, dw = matmul_ab_bwd(comm, dym, saved["x"], params.w, saved["d"])
    gs.toggle()
    return Activation3D.from_matrix(dxm, gs.input_group, dy.b, dy.s), dw, db


# -- layer norm ----------------------------------------------------------------


def layernorm3d_fwd(comm: Endpoint, x: Activation3D, params: LayerNormParams, eps: float = 1e-5):
    hidden = comm.group(x.directions.output_axis)
    xl = x.local
    mu = comm.all_reduce(hidden, xl.sum(axis=-1, keepdims=True)) / x.h
    xc = xl - mu
    var = comm.all_reduce(hidden, (xc * xc).sum(axis=-1, keepdims=True)) / x.h
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = x.with_local(xc * rstd).as_matrix()
    gseg = expand_vector(comm, xhat, params.gamma)
    z = mul_vec_fwd(comm, xhat, params.gamma, expanded=gseg)
    y = add_vec_fwd(comm, z, params.beta)
    out = Activation3D.from_matrix(y, x.group, x.b, x.s)
    return out, {"xhat": xhat, "rstd": rstd, "gseg": gseg}


def layernorm3d_bwd(comm: Endpoint, dy: Activation3D, saved, params: LayerNormParams):
    hidden = comm.group(dy.directions.output_axis)
    dym = dy.as_matrix()
    _, dbeta = add_vec_bwd(comm, dym, params.beta)
    dxhat_m, dgamma = mul_vec_bwd(comm, dym, saved["xhat"], params.gamma, expanded=saved["gseg"])
    bl, sl, hl = dy.local.shape
    dxhat = dxhat_m.local.reshape(bl, sl, hl)
    xhat = saved["xhat"].local.reshape(bl, sl, hl)
    sums = np.stack([dxhat.sum(axis=-1), (dxhat * xhat).sum(axis=-1)])
    sums = comm.all_reduce(hidden, sums) / dy.h
    dx = saved["rstd"] * (dxhat - sums[0][..., None] - xhat * sums[1][..., None])
    return dy.with_local(dx), dgamma, dbeta


# -- attention -----------------------------------------------------------------


def _split_heads(local: np.ndarray, n: int) -> np.ndarray:
    bl, sl, hl = local.shape
    return local.reshape(bl, sl, n, hl // n).transpose(0, 2, 1, 3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    bl, n, sl, dl = t.shape
    return t.transpose(0, 2, 1, 3).reshape(bl, sl, n * dl)


def _local_product(comm: Endpoint, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    comm.charge_compute(kernels.multiply_adds(a.shape, b.shape))
    return kernels.matmul(a, b)


def attention_core_fwd(comm: Endpoint, qkv: Activation3D, n: int):
    """softmax(Q K^T / sqrt(h/n)) V on the (seq, hidden) plane of each batch slice."""
    d = qkv.directions
    seq, hid = comm.group(d.input_axis), comm.group(d.output_axis)
    bl, sl, hl3 = qkv.local.shape
    parts = qkv.local.reshape(bl, sl, 3, hl3 // 3)
    q, k, v = (_split_heads(parts[:, :, i], n) for i in range(3))  # [b/p, n, s/p, dh/p]
    scale = 1.0 / math.sqrt(qkv.h // 3 // n)

    kg = comm.all_gather(seq, k, axis=-2)  # all keys, local head-dim slice
    scores = comm.reduce_scatter(hid, _local_product(comm, q, np.swapaxes(kg, -1, -2)), axis=-1)
    scores = scores * scale  # [b/p, n, s/p, s/p]: keys split along the hidden axis
    m = comm.all_reduce(hid, scores.max(axis=-1, keepdims=True), op="max")
    e = np.exp(scores - m)
    z = comm.all_reduce(hid, e.sum(axis=-1, keepdims=True))
    probs = e / z
    pg = comm.all_gather(hid, probs, axis=-1)
    vg = comm.all_gather(seq, v, axis=-2)
    ctx = _local_product(comm, pg, vg)
    out = Activation3D(_merge_heads(ctx), qkv.group, qkv.b, qkv.s, qkv.h // 3, qkv.coords,
                       qkv.p, qkv.rank)
    return out, {"q": q, "kg": kg, "vg": vg, "probs": probs, "pg": pg, "scale": scale, "n": n}


def attention_core_bwd(comm: Endpoint, dctx: Activation3D, saved, like: Activation3D):
    d = dctx.directions
    seq, hid = comm.group(d.input_axis), comm.group(d.output_axis)
    n = saved["n"]
    do = _split_heads(dctx.local, n)
    dprobs = comm.reduce_scatter(hid, _local_product(comm, do, np.swapaxes(saved["vg"], -1, -2)),
                                 axis=-1)
    dv = comm.reduce_scatter(seq, _local_product(comm, np.swapaxes(saved["pg"], -1, -2), do),
                             axis=-2)
    probs = saved["probs"]
    r = comm.all_reduce(hid, (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores = probs * (dprobs - r) * saved["scale"]
    dsg = comm.all_gather(hid, dscores, axis=-1)
    dq = _local_product(comm, dsg, saved["kg"])
    dk = comm.reduce_scatter(seq, _local_product(comm, np.swapaxes(dsg, -1, -2), saved["q"]),
                             axis=-2)
    bl, sl = dq.shape[0], dq.shape[2]
    dqkv = np.stack([_merge_heads(t) for t in (dq, dk, dv)], axis=2).reshape(bl, sl, -1)
    return like.with_local(dqkv)


def attention_fwd(comm: Endpoint, x: Activation3D, params: AttentionParams, cfg: TransformerConfig,
                  gs: GroupState):
    if cfg.n % x.p or (x.h // cfg.n) % x.p:
        raise HeadsIndivisible(f"n={cfg.n}, h={x.h} cannot be split over p={x.p}")
    qkv, s_qkv = linear3d_fwd(comm, x, params.qkv, gs)
    ctx, s_core = attention_core_fwd(comm, qkv, cfg.n)
    out, s_out = linear3d_fwd(comm, ctx, params.out, gs)
    return out, {"qkv": s_qkv, "core": s_core, "out": s_out, "qkv_act": qkv}


def attention_bwd(comm: Endpoint, dout: Activation3D, saved, params: AttentionParams,
                  cfg: TransformerConfig, gs: GroupState):
    dctx, dw_out, db_out = linear3d_bwd(comm, dout, saved["out"], params.out, gs)
    dqkv = attention_core_bwd(comm, dctx, saved["core"], saved["qkv_act"])
    dx, dw_qkv, db_qkv = linear3d_bwd(comm, dqkv, saved["qkv"], params.qkv, gs)
    return dx, AttentionParams(LinearParams(dw_qkv, db_qkv), LinearParams(dw_out, db_out))


# -- MLP -----------------------------------------------------------------------

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _SQRT_HALF)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def mlp_fwd(comm: Endpoint, x: Activation3D, params: MLPParams, cfg: TransformerConfig,
            gs: GroupState):
    hid, s1 = linear3d_fwd(comm, x, params.fc1, gs)
    act = hid.with_local(gelu(hid.local))
    out, s2 = linear3d_fwd(comm, act, params.fc2, gs)
    return out, {"fc1": s1, "fc2": s2, "pre": hid.local}


def mlp_bwd(comm: Endpoint, dout: Activation3D, saved, params: MLPParams, cfg: TransformerConfig,
            gs: GroupState):
    dact, dw2, db2 = linear3d_bwd(comm, dout, saved["fc2"], params.fc2, gs)
    dhid = dact.with_local(dact.local * gelu_grad(saved["pre"]))
    dx, dw1, db1 = linear3d_bwd(comm, dhid, saved["fc1"], params.fc1, gs)
    return dx, MLPParams(LinearParams(dw1, db1), LinearParams(dw2, db2))


# -- full layer ----------------------------------------------------------------


def transformer_layer_fwd(comm: Endpoint, x: Activation3D, params: LayerParams,
                          cfg: TransformerConfig, gs: GroupState):
    """Pre-norm residual layer: y = x + Attn(LN1(x)); out = y + MLP(LN2(y))."""
    a_in, s_ln1 = layernorm3d_fwd(comm, x, params.ln1, cfg.eps)
    a_out, s_attn = attention_fwd(comm, a_in, params.attn, cfg, gs)
    y = x.with_local(x.local + a_out.local)
    m_in, s_ln2 = layernorm3d_fwd(comm, y, params.ln2, cfg.eps)
    m_out, s_mlp = mlp_fwd(comm, m_in, params.mlp, cfg, gs)
    out = y.with_local(y.local + m_out.local)
    return out, {"ln1": s_ln1, "attn": s_attn, "ln2": s_ln2, "mlp": s_mlp}


def transformer_layer_bwd(comm: Endpoint, dout: Activation3D, saved, params: LayerParams,
                          cfg: TransformerConfig, gs: GroupState):
    dm_in, g_mlp = mlp_bwd(comm, dout, saved["mlp"], params.mlp, cfg, gs)
    dy_ln, dg2, db2 = layernorm3d_bwd(comm, dm_in, saved["ln2"], params.ln2)
    dy = dout.with_local(dout.local + dy_ln.local)
    da_in, g_attn = attention_bwd(comm, dy, saved["attn"], params.attn, cfg, gs)
    dx_ln, dg1, db1 = layernorm3d_bwd(comm, da_in, saved["ln1"], params.ln1)
    dx = dy.with_local(dy.local + dx_ln.local)
    grads = LayerParams(LayerNormParams(dg1, db1), g_attn, LayerNormParams(dg2, db2), g_mlp)
    return dx, grads


def transformer_fwd(comm: Endpoint, x: Activation3D, layers: list[LayerParams],
                    cfg: TransformerConfig, gs: GroupState):
    saved = []
    for lp in layers:
        x, s = transformer_layer_fwd(comm, x, lp, cfg, gs)
        saved.append(s)
    return x, saved


def transformer_bwd(comm: Endpoint, dout: Activation3D, saved, layers: list[LayerParams],
                    cfg: TransformerConfig, gs: GroupState):
    grads = [None] * len(layers)
    for i in reversed(range(len(layers))):
        dout, grads[i] = transformer_layer_bwd(comm, dout, saved[i], layers[i], cfg, gs)
    return dout, grads


# -- serialization -------------------------------------------------------------


def save_layer_params(directory, params: LayerParams) -> None:
    """One matrix file per global parameter; vectors are stored as 1 x n."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, v in param_items(params):
        matfile.save(d / f"{name}.bin", np.atleast_2d(v))


def load_layer_params(directory) -> LayerParams:
    d = Path(directory)
    vals = {name: matfile.load(d / f"{name}.bin") for name, _ in param_items(_NAMES_ONLY)}
    for k, v in vals.items():
        if not k.endswith(".w"):
            vals[k] = v.reshape(-1)

    def lin(prefix):
        return LinearParams(vals[prefix + ".w"], vals[prefix + ".b"])

    return LayerParams(
        LayerNormParams(vals["ln1.gamma"], vals["ln1.beta"]),
        AttentionParams(lin("attn.qkv"), lin("attn.out")),
        LayerNormParams(vals["ln2.gamma"], vals["ln2.beta"]),
        MLPParams(lin("mlp.fc1"), lin("mlp.fc2")),
    )


_NAMES_ONLY = LayerParams(
    LayerNormParams(None, None),
    AttentionParams(LinearParams(None, None), LinearParams(None, None)),
    LayerNormParams(None, None),
    MLPParams(LinearParams(None, None), LinearParams(None, None)),
)
