"""Single-process references used as oracles.

``serial_matmul`` is a plain triple loop, independent of numpy's matmul.
The transformer reference works on global tensors with the same kernel and
the same operation order as the distributed layers, so at ``p = 1`` the two
agree bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeMismatch
from .kernels import matmul
from .layers import (
    AttentionParams,
    LayerNormParams,
    LayerParams,
    LinearParams,
    MLPParams,
    TransformerConfig,
    gelu,
    gelu_grad,
)


def serial_matmul(a, b, form: str = "ab"):
    """Triple-loop product of two nested lists or 2-D arrays (i, j, k order).

    ``form`` picks ``a @ b``, ``a @ b.T`` or ``a.T @ b``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if form == "abt":
        b = b.T
    elif form == "atb":
        a = a.T
    elif form != "ab":
        raise ValueError(f"form must be ab, abt or atb, got {form!r}")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    m, n = a.shape
    k = b.shape[1]
    al, bl = a.tolist(), b.tolist()
    out = [[0.0] * k for _ in range(m)]
    for i in range(m):
        row = out[i]
        ai = al[i]
        for j in range(n):
            aij = ai[j]
            bj = bl[j]
            for t in range(k):
                row[t] += aij * bj[t]
    return np.array(out)


def _tokens(x):
    return x.reshape(-1, x.shape[-1])


def linear_fwd(x, lp: LinearParams):
    y = matmul(_tokens(x), lp.w) + lp.b
    return y.reshape(x.shape[:-1] + (lp.w.shape[1],)), x


def linear_bwd(dy, x, lp: LinearParams):
    d2 = _tokens(dy)
    db = d2.sum(axis=0)
    dx = matmul(d2, lp.w.T)
    dw = matmul(_tokens(x).T, d2)
    return dx.reshape(x.shape), LinearParams(dw, db)


def layernorm_fwd(x, lp: LayerNormParams, eps):
    h = x.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) / h
    xc = x - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) / h
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * lp.gamma + lp.beta, (xhat, rstd)


def layernorm_bwd(dy, saved, lp: LayerNormParams):
    xhat, rstd = saved
    h = dy.shape[-1]
    dbeta = _tokens(dy).sum(axis=0)
    dgamma = _tokens(dy * xhat).sum(axis=0)
    dxhat = dy * lp.gamma
    m1 = dxhat.sum(axis=-1, keepdims=True) / h
    m2 = (dxhat * xhat).sum(axis=-1, keepdims=True) / h
    return rstd * (dxhat - m1 - xhat * m2), LayerNormParams(dgamma, dbeta)


def _heads(t, n):
    b, s, h = t.shape
    return t.reshape(b, s, n, h // n).transpose(0, 2, 1, 3)


def _merge(t):
    b, n, s, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, s, n * dh)


def attention_fwd(x, ap: AttentionParams, n):
    h = x.shape[-1]
    qkv, s_qkv = linear_fwd(x, ap.qkv)
    q, k, v = (_heads(qkv[..., i * h:(i + 1) * h], n) for i in range(3))
    scale = 1.0 / math.sqrt(h // n)
    scores = matmul(q, np.swapaxes(k, -1, -2)) * scale
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = _merge(matmul(probs, v))
    out, s_out = linear_fwd(ctx, ap.out)
    return out, (s_qkv, s_out, q, k, v, probs, scale)


def attention_bwd(dout, saved, ap: AttentionParams, n):
    s_qkv, s_out, q, k, v, probs, scale = saved
    dctx, g_out = linear_bwd(dout, s_out, ap.out)
    do = _heads(dctx, n)
    dprobs = matmul(do, np.swapaxes(v, -1, -2))
    dv = matmul(np.swapaxes(probs, -1, -2), do)
    r = (dprobs * probs).sum(axis=-1, keepdims=True)
    ds = probs * (dprobs - r) * scale
    dq = matmul(ds, k)
    dk = matmul(np.swapaxes(ds, -1, -2), q)
    dqkv = np.concatenate([_merge(t) for t in (dq, dk, dv)], axis=-1)
    dx, g_qkv = linear_bwd(dqkv, s_qkv, ap.qkv)
    return dx, AttentionParams(g_qkv, g_out)


def mlp_fwd(x, mp: MLPParams):
    pre, s1 = linear_fwd(x, mp.fc1)
    out, s2 = linear_fwd(gelu(pre), mp.fc2)
    return out, (s1, s2, pre)


def mlp_bwd(dout, saved, mp: MLPParams):
    s1, s2, pre = saved
    dact, g2 = linear_bwd(dout, s2, mp.fc2)
    dx, g1 = linear_bwd(dact * gelu_grad(pre), s1, mp.fc1)
    return dx, MLPParams(g1, g2)


def layer_fwd(x, lp: LayerParams, cfg: TransformerConfig):
    a_in, s1 = layernorm_fwd(x, lp.ln1, cfg.eps)
    a_out, sa = attention_fwd(a_in, lp.attn, cfg.n)
    y = x + a_out
    m_in, s2 = layernorm_fwd(y, lp.ln2, cfg.eps)
    m_out, sm = mlp_fwd(m_in, lp.mlp)
    return y + m_out, (s1, sa, s2, sm)


def layer_bwd(dout, saved, lp: LayerParams, cfg: TransformerConfig):
    s1, sa, s2, sm = saved
    dm_in, g_mlp = mlp_bwd(dout, sm, lp.mlp)
    dy_ln, g_ln2 = layernorm_bwd(dm_in, s2, lp.ln2)
    dy = dout + dy_ln
    da_in, g_attn = attention_bwd(dy, sa, lp.attn, cfg.n)
    dx_ln, g_ln1 = layernorm_bwd(da_in, s1, lp.ln1)
    return dy + dx_ln, LayerParams(g_ln1, g_attn, g_ln2, g_mlp)


def transformer_reference(x, layers: list[LayerParams], cfg: TransformerConfig, dout=None):
    """Forward (and, given ``dout``, backward) through a stack of layers.

    Returns ``(y, dx, grads)``; ``dx`` and ``grads`` are None without ``dout``.
    """
    saved = []
    for lp in layers:
        x, s = layer_fwd(x, lp, cfg)
        saved.append(s)
    if dout is None:
        return x, None, None
    grads = [None] * len(layers)
    for i in reversed(range(len(layers))):
        dout, grads[i] = layer_bwd(dout, saved[i], layers[i], cfg)
    return x, dout, grads
