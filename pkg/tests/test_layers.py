import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cube3d import layers as L
from cube3d import reference as R
from cube3d.costs import predict_layer_costs
from cube3d.errors import ConfigInvalid, GroupMismatch, HeadsIndivisible, ShapeMismatch
from cube3d.gradcheck import finite_diff, rel_err, sample_indices
from cube3d.topology import CubeTopology
from cube3d.verify import simulate_transformer

from conftest import (
    attn_block,
    linear_block,
    linear_bwd,
    ln_block,
    ln_bwd,
    mlp_block,
    run_block,
    spmd,
    uniform,
)

CFG = L.TransformerConfig(b=2, s=8, n=2, h=16, p=2)


# -- config --------------------------------------------------------------------


def test_config_invariants():
    CFG.validate()
    for bad in (dict(b=3), dict(s=5), dict(h=18), dict(n=3, h=24)):
        with pytest.raises((ConfigInvalid, HeadsIndivisible)):
            L.TransformerConfig(**{**CFG.__dict__, **bad}).validate()
    with pytest.raises(HeadsIndivisible):
        L.TransformerConfig(b=2, s=2, n=1, h=16, p=2).validate()
    with pytest.raises(HeadsIndivisible):
        L.TransformerConfig(b=2, s=2, n=4, h=12, p=2).validate()  # head dim 3


def test_group_state_toggle():
    gs = L.GroupState(0)
    gs.toggle()
    assert gs.input_group == 1
    gs.toggle()
    assert gs.input_group == 0
    assert L.directions_for(0).swap_io() == L.directions_for(1)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 3), st.integers(0, 1), st.integers(0, 100))
def test_activation_roundtrip_and_matrix_view(p, group, seed):
    x = np.random.default_rng(seed).standard_normal((2 * p, 3 * p, 2 * p))
    acts = L.partition_activation(x, CubeTopology(p), group)
    assert L.collect_activation(acts).tobytes() == x.tobytes()
    for a in acts:
        m = a.as_matrix()
        back = L.Activation3D.from_matrix(m, group, a.b, a.s)
        assert back.local.tobytes() == a.local.tobytes()
        assert m.local.shape == (x.shape[0] * x.shape[1] // p**2, x.shape[2] // p)


# -- linear --------------------------------------------------------------------


def test_linear_identity_and_zero_input(rng):
    topo = CubeTopology(2)
    x = rng.standard_normal((2, 4, 8))
    shards = L.shard_linear(L.LinearParams(np.eye(8), np.zeros(8)), topo)
    y, after, *_ = run_block(2, x, shards, linear_block)
    assert y.tobytes() == x.tobytes() and after == 1
    bias = rng.standard_normal(8)
    shards = L.shard_linear(L.LinearParams(rng.standard_normal((8, 8)), bias), topo)
    y, *_ = run_block(2, np.zeros_like(x), shards, linear_block)
    assert all(np.array_equal(row, bias) for row in y.reshape(-1, 8))


def test_linear_matches_serial(rng):
    x = rng.uniform(-1, 1, (2, 4, 8))
    lp = L.LinearParams(uniform(rng, 8, 16), uniform(rng, 16))
    y, *_ = run_block(2, x, L.shard_linear(lp, CubeTopology(2)), linear_block)
    want = R.serial_matmul(x.reshape(-1, 8), lp.w).reshape(2, 4, 16) + lp.b
    assert rel_err(y, want) <= 1e-12


def test_linear_backward(rng):
    topo = CubeTopology(2)
    x = rng.uniform(-1, 1, (2, 4, 8))
    lp = L.LinearParams(uniform(rng, 8, 16), uniform(rng, 16))
    g = rng.uniform(-1, 1, (2, 4, 16))
    _, groups, dx, grads, _ = run_block(2, x, L.shard_linear(lp, topo), linear_block, linear_bwd, g)
    assert groups == (1, 0)
    dw = L.collect_linear([L.LinearParams(*gr) for gr in grads])

    def loss():
        return float(np.sum(run_block(2, x, L.shard_linear(lp, topo), linear_block)[0] * g))

    assert rel_err(dx, finite_diff(loss, x)) <= 1e-6
    assert rel_err(dw.w, finite_diff(loss, lp.w)) <= 1e-6
    assert rel_err(dw.b, finite_diff(loss, lp.b)) <= 1e-6


def test_linear_backward_trivial(rng):
    topo = CubeTopology(2)
    x = rng.standard_normal((2, 4, 8))
    lp = L.LinearParams(rng.standard_normal((8, 8)), rng.standard_normal(8))
    _, _, dx, grads, _ = run_block(2, x, L.shard_linear(lp, topo), linear_block, linear_bwd,
                                   np.zeros((2, 4, 8)))
    dw = L.collect_linear([L.LinearParams(*gr) for gr in grads])
    assert not dx.any() and not dw.w.any() and not dw.b.any()
    g = rng.standard_normal((2, 4, 8))
    eye = L.LinearParams(np.eye(8), np.zeros(8))
    _, _, dx, _, _ = run_block(2, x, L.shard_linear(eye, topo), linear_block, linear_bwd, g)
    assert dx.tobytes() == g.tobytes()


def test_linear_rejects_wrong_group(rng):
    topo = CubeTopology(2)
    xs = L.partition_activation(rng.standard_normal((2, 4, 8)), topo, 1)
    shards = L.shard_linear(L.LinearParams(np.eye(8), np.zeros(8)), topo)
    with pytest.raises(GroupMismatch):
        spmd(2, lambda c: L.linear3d_fwd(c, xs[c.rank], shards[c.rank], L.GroupState(0)))
    with pytest.raises(GroupMismatch):
        L.directions_for(2)


def test_linear_rejects_wrong_width(rng):
    topo = CubeTopology(1)
    xs = L.partition_activation(rng.standard_normal((2, 4, 8)), topo)
    shards = L.shard_linear(L.LinearParams(np.eye(4), np.zeros(4)), topo)
    with pytest.raises(ShapeMismatch):
        spmd(1, lambda c: L.linear3d_fwd(c, xs[0], shards[0], L.GroupState(0)))


# -- layer norm ----------------------------------------------------------------


def test_layernorm_trivial(rng):
    topo = CubeTopology(2)
    x = np.repeat(rng.standard_normal((2, 4, 1)), 8, axis=2)
    ident = L.shard_layernorm(L.LayerNormParams(np.ones(8), np.zeros(8)), topo)
    y, after, *_ = run_block(2, x, ident, ln_block)
    assert np.abs(y).max() <= 1e-6 and after == 0
    beta = rng.standard_normal(8)
    zero_gain = L.shard_layernorm(L.LayerNormParams(np.zeros(8), beta), topo)
    y, *_ = run_block(2, rng.standard_normal((2, 4, 8)), zero_gain, ln_block)
    assert all(np.array_equal(row, beta) for row in y.reshape(-1, 8))


def test_layernorm_matches_serial_and_gradients(rng):
    topo = CubeTopology(2)
    x = rng.uniform(-1, 1, (2, 4, 8))
    lp = L.LayerNormParams(1 + uniform(rng, 8), uniform(rng, 8))
    g = rng.uniform(-1, 1, x.shape)
    y, _, dx, grads, _ = run_block(2, x, L.shard_layernorm(lp, topo), ln_block, ln_bwd, g)
    assert rel_err(y, R.layernorm_fwd(x, lp, 1e-5)[0]) <= 1e-12
    dp = L.collect_layernorm([L.LayerNormParams(*gr) for gr in grads])
    assert rel_err(dp.beta, g.reshape(-1, 8).sum(axis=0)) <= 1e-12

    def loss():
        return float(np.sum(run_block(2, x, L.shard_layernorm(lp, topo), ln_block)[0] * g))

    assert rel_err(dx, finite_diff(loss, x)) <= 1e-6
    assert rel_err(dp.gamma, finite_diff(loss, lp.gamma)) <= 1e-6
    assert rel_err(dp.beta, finite_diff(loss, lp.beta)) <= 1e-6

    _, _, dx0, grads0, _ = run_block(2, x, L.shard_layernorm(lp, topo), ln_block, ln_bwd,
                                     np.zeros_like(g))
    dp0 = L.collect_layernorm([L.LayerNormParams(*gr) for gr in grads0])
    assert not dx0.any() and not dp0.gamma.any() and not dp0.beta.any()


# -- attention -----------------------------------------------------------------


def init_attention(cfg, rng):
    h = cfg.h
    return L.AttentionParams(L.LinearParams(uniform(rng, h, 3 * h), uniform(rng, 3 * h)),
                             L.LinearParams(uniform(rng, h, h), uniform(rng, h)))


def test_storage_orders_are_permutations():
    for h, n, p in ((16, 2, 2), (36, 3, 3), (8, 2, 1)):
        assert sorted(L.qkv_storage_order(h, n, p)) == list(range(3 * h))
        assert sorted(L.head_storage_order(h, n, p)) == list(range(h))
    assert list(L.qkv_storage_order(8, 2, 1)) == list(range(24))


def test_attention_matches_serial(rng):
    fwd, _ = attn_block(CFG)
    ap = init_attention(CFG, rng)
    x = rng.uniform(-1, 1, (CFG.b, CFG.s, CFG.h))
    y, after, *_ = run_block(2, x, L.shard_attention(ap, CFG, CubeTopology(2)), fwd)
    assert after == 0
    assert rel_err(y, R.attention_fwd(x, ap, CFG.n)[0]) <= 1e-10


def test_attention_single_key_is_value_path(rng):
    cfg = L.TransformerConfig(b=2, s=1, n=2, h=8, p=1)
    fwd, bwd = attn_block(cfg)
    ap = init_attention(cfg, rng)
    x = rng.uniform(-1, 1, (2, 1, 8))
    g = rng.uniform(-1, 1, (2, 1, 8))
    y, _, dx, grads, _ = run_block(1, x, L.shard_attention(ap, cfg, CubeTopology(1)), fwd, bwd, g)
    wv, bv = ap.qkv.w[:, 16:], ap.qkv.b[16:]
    v = x.reshape(2, 8) @ wv + bv
    assert rel_err(y.reshape(2, 8), v @ ap.out.w + ap.out.b) <= 1e-12
    # gradients equal the plain two-linear chain through the value columns
    g2 = g.reshape(2, 8)
    dctx = g2 @ ap.out.w.T
    assert rel_err(dx.reshape(2, 8), dctx @ wv.T) <= 1e-12
    dp = L.collect_attention([gr[0] for gr in grads], cfg)
    assert not dp.qkv.w[:, :16].any()
    assert rel_err(dp.out.w, v.T @ g2) <= 1e-12


def test_attention_zero_logits_average_values(rng):
    cfg = CFG
    fwd, _ = attn_block(cfg)
    h = cfg.h
    wqkv = uniform(rng, h, 3 * h)
    bqkv = uniform(rng, 3 * h)
    wqkv[:, :2 * h] = 0
    bqkv[:2 * h] = 0
    ap = L.AttentionParams(L.LinearParams(wqkv, bqkv), L.LinearParams(np.eye(h), np.zeros(h)))
    x = rng.uniform(-1, 1, (cfg.b, cfg.s, h))
    y, *_ = run_block(2, x, L.shard_attention(ap, cfg, CubeTopology(2)), fwd)
    v = x @ wqkv[:, 2 * h:] + bqkv[2 * h:]
    assert rel_err(y, np.broadcast_to(v.mean(axis=1, keepdims=True), y.shape)) <= 1e-12


def test_attention_gradients(rng):
    topo = CubeTopology(2)
    fwd, bwd = attn_block(CFG)
    ap = init_attention(CFG, rng)
    x = rng.uniform(-1, 1, (CFG.b, CFG.s, CFG.h))
    g = rng.uniform(-1, 1, x.shape)
    _, groups, dx, grads, _ = run_block(2, x, L.shard_attention(ap, CFG, topo), fwd, bwd, g)
    assert groups == (0, 0)
    dp = L.collect_attention([gr[0] for gr in grads], CFG)

    def loss():
        return float(np.sum(run_block(2, x, L.shard_attention(ap, CFG, topo), fwd)[0] * g))

    fd_rng = np.random.default_rng(0)
    for got, param in ((dx, x), (dp.qkv.w, ap.qkv.w), (dp.qkv.b, ap.qkv.b), (dp.out.w, ap.out.w),
                       (dp.out.b, ap.out.b)):
        idx = sample_indices(param.shape, 6, fd_rng)
        est = finite_diff(loss, param, 1e-5, idx)
        err = max(abs(est[i] - got[i]) for i in idx) / np.abs(got).max()
        assert err <= 1e-5
    _, _, dx0, grads0, _ = run_block(2, x, L.shard_attention(ap, CFG, topo), fwd, bwd, np.zeros_like(g))
    dp0 = L.collect_attention([gr[0] for gr in grads0], CFG)
    assert not dx0.any() and not any(v.any() for v in (dp0.qkv.w, dp0.qkv.b, dp0.out.w, dp0.out.b))


def test_attention_rejects_indivisible_heads(rng):
    cfg = L.TransformerConfig(b=2, s=2, n=1, h=4, p=2)
    topo = CubeTopology(2)
    xs = L.partition_activation(rng.standard_normal((2, 2, 4)), topo)
    ap = L.AttentionParams(L.LinearParams(np.zeros((4, 12)), np.zeros(12)),
                           L.LinearParams(np.zeros((4, 4)), np.zeros(4)))
    with pytest.raises(HeadsIndivisible):
        spmd(2, lambda c: L.attention_fwd(c, xs[c.rank], ap, cfg, L.GroupState(0)))


# -- MLP -----------------------------------------------------------------------


def test_gelu_values():
    assert L.gelu(np.array(0.0)) == 0.0
    x = np.linspace(-4, 4, 17)
    fd = (L.gelu(x + 1e-6) - L.gelu(x - 1e-6)) / 2e-6
    assert np.abs(fd - L.gelu_grad(x)).max() <= 1e-8


def test_mlp_trivial_cases(rng):
    topo = CubeTopology(2)
    fwd, _ = mlp_block(CFG)
    h = CFG.h
    mp = L.MLPParams(L.LinearParams(uniform(rng, h, 4 * h), np.zeros(4 * h)),
                     L.LinearParams(uniform(rng, 4 * h, h), np.zeros(h)))
    y, after, *_ = run_block(2, np.zeros((2, 8, h)), L.shard_mlp(mp, topo), fwd)
    assert not y.any() and after == 0
    w1 = np.zeros((h, 4 * h))
    w1[:, :h] = np.eye(h)
    w2 = np.zeros((4 * h, h))
    w2[:h] = np.eye(h)
    mp = L.MLPParams(L.LinearParams(w1, np.zeros(4 * h)), L.LinearParams(w2, np.zeros(h)))
    x = rng.uniform(6, 9, (2, 8, h))
    y, *_ = run_block(2, x, L.shard_mlp(mp, topo), fwd)
    assert np.all(y / x >= 1 - 1e-6)


def test_mlp_matches_serial_and_gradients(rng):
    topo = CubeTopology(2)
    fwd, bwd = mlp_block(CFG)
    h = CFG.h
    mp = L.MLPParams(L.LinearParams(uniform(rng, h, 4 * h), uniform(rng, 4 * h)),
                     L.LinearParams(uniform(rng, 4 * h, h), uniform(rng, h)))
    x = rng.uniform(-1, 1, (2, 8, h))
    g = rng.uniform(-1, 1, x.shape)
    y, groups, dx, grads, _ = run_block(2, x, L.shard_mlp(mp, topo), fwd, bwd, g)
    assert groups == (0, 0)
    assert rel_err(y, R.mlp_fwd(x, mp)[0]) <= 1e-12
    dp = L.collect_mlp([gr[0] for gr in grads])

    def loss():
        return float(np.sum(run_block(2, x, L.shard_mlp(mp, topo), fwd)[0] * g))

    fd_rng = np.random.default_rng(1)
    for got, param in ((dx, x), (dp.fc1.w, mp.fc1.w), (dp.fc1.b, mp.fc1.b), (dp.fc2.w, mp.fc2.w),
                       (dp.fc2.b, mp.fc2.b)):
        idx = sample_indices(param.shape, 6, fd_rng)
        est = finite_diff(loss, param, 1e-5, idx)
        assert max(abs(est[i] - got[i]) for i in idx) / np.abs(got).max() <= 1e-6


# -- full layer ----------------------------------------------------------------


def zero_layer(h):
    z = lambda *s: np.zeros(s)  # noqa: E731
    return L.LayerParams(
        L.LayerNormParams(np.ones(h), z(h)),
        L.AttentionParams(L.LinearParams(z(h, 3 * h), z(3 * h)), L.LinearParams(z(h, h), z(h))),
        L.LayerNormParams(np.ones(h), z(h)),
        L.MLPParams(L.LinearParams(z(h, 4 * h), z(4 * h)), L.LinearParams(z(4 * h, h), z(h))),
    )


def test_zero_weight_layer_is_identity(rng):
    x = rng.standard_normal((2, 8, 16))
    run = simulate_transformer(CFG, [zero_layer(16)], x)
    assert run.y.tobytes() == x.tobytes()
    y_ref, _, _ = R.transformer_reference(x, [zero_layer(16)], CFG)
    assert y_ref.tobytes() == x.tobytes()


@pytest.mark.parametrize("layers,tol", [(1, 1e-10), (2, 1e-9)])
def test_layers_match_serial(layers, tol, rng):
    cfg = L.TransformerConfig(b=2, s=8, n=2, h=16, p=2, layers=layers)
    params = [L.init_layer_params(cfg, rng) for _ in range(layers)]
    x = rng.uniform(-1, 1, (2, 8, 16))
    g = rng.uniform(-1, 1, x.shape)
    run = simulate_transformer(cfg, params, x, g)
    y_ref, dx_ref, g_ref = R.transformer_reference(x, params, cfg, g)
    assert rel_err(run.y, y_ref) <= tol
    assert rel_err(run.dx, dx_ref) <= tol
    for got, want in zip(run.grads, g_ref):
        for (name, a), (_, b) in zip(L.param_items(got), L.param_items(want)):
            assert rel_err(a, b) <= tol, name
    assert all(before == after for before, after in run.groups)


def test_p1_layer_is_bitwise_serial(rng):
    cfg = L.TransformerConfig(b=2, s=3, n=2, h=8, p=1, layers=2)
    params = [L.init_layer_params(cfg, rng) for _ in range(2)]
    x = rng.standard_normal((2, 3, 8))
    g = rng.standard_normal(x.shape)
    run = simulate_transformer(cfg, params, x, g)
    y_ref, dx_ref, g_ref = R.transformer_reference(x, params, cfg, g)
    assert run.y.tobytes() == y_ref.tobytes() and run.dx.tobytes() == dx_ref.tobytes()
    for got, want in zip(run.grads, g_ref):
        for (_, a), (_, b) in zip(L.param_items(got), L.param_items(want)):
            assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("p,cfg", [
    (2, L.TransformerConfig(b=2, s=8, n=2, h=16, p=2)),
    (3, L.TransformerConfig(b=3, s=6, n=3, h=36, p=3)),
])
def test_balance_and_comm_accounting(p, cfg, rng):
    params = [L.init_layer_params(cfg, rng)]
    x = rng.standard_normal((cfg.b, cfg.s, cfg.h))
    run = simulate_transformer(cfg, params, x, rng.standard_normal(x.shape))
    assert run.activation_sizes == {cfg.b * cfg.s * cfg.h // p**3}
    assert all(len(v) == 1 for v in run.shard_sizes.values())
    lc = predict_layer_costs(cfg)
    assert run.forward_received == lc.forward.comm_elems
    assert run.backward_received == lc.backward.comm_elems
    assert run.forward_macs == lc.forward.multiply_adds
    assert run.backward_macs == lc.backward.multiply_adds


def test_params_save_load(tmp_path, rng):
    lp = L.init_layer_params(CFG, rng)
    L.save_layer_params(tmp_path, lp)
    back = L.load_layer_params(tmp_path)
    for (n1, a), (n2, b) in zip(L.param_items(lp), L.param_items(back)):
        assert n1 == n2 and a.shape == b.shape and a.tobytes() == b.tobytes()


def test_shard_collect_params_roundtrip(rng):
    lp = L.init_layer_params(CFG, rng)
    back = L.collect_layer_params(L.shard_layer_params(lp, CFG, CubeTopology(2)), CFG)
    for (_, a), (_, b) in zip(L.param_items(lp), L.param_items(back)):
        assert a.tobytes() == b.tobytes()
