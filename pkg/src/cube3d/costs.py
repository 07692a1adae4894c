"""Analytic cost model.

Per-matmul predictions follow the balanced-layout formulas: memory
``(M/p^2)(N/p) + (N/p)(K/p^2) + (M/p^2)(K/p)``, compute ``MNK/p^3`` and
``(p-1)(MN+NK+MK)/p^3`` elements received per rank.

The layer-level model lists every collective and local product a
Transformer layer issues and charges it exactly as the transport does, so
it can be compared with the counters by integer equality.  Layer totals
are summed over all ranks (elements received; multiply-adds).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import IndivisibleShape
from .layers import TransformerConfig


@dataclass(frozen=True)
class CostPrediction:
    per_rank_memory_elems: int
    per_rank_multiply_adds: int
    per_rank_comm_elems: int
    latency_hops: int


def latency_hops(p: int, rounds: int = 3) -> int:
    return rounds * math.ceil(math.log2(p)) if p > 1 else 0


def predict_costs(M: int, N: int, K: int, p: int) -> CostPrediction:
    """One forward ``(M x N) @ (N x K)`` product on a ``p``-cube."""
    q = p * p
    for name, n in (("M", M), ("N", N), ("K", K)):
        if n % q:
            raise IndivisibleShape(name, n, q)
    P = p**3
    memory = (M // q) * (N // p) + (N // p) * (K // q) + (M // q) * (K // p)
    return CostPrediction(
        per_rank_memory_elems=memory,
        per_rank_multiply_adds=M * N * K // P,
        per_rank_comm_elems=(p - 1) * (M * N + N * K + M * K) // P,
        latency_hops=latency_hops(p),
    )


# -- layer level ---------------------------------------------------------------


@dataclass(frozen=True)
class OpCost:
    name: str
    comm_elems: int  # received, summed over ranks
    multiply_adds: int = 0  # summed over ranks


@dataclass
class PassCosts:
    ops: list[OpCost] = field(default_factory=list)

    def add(self, name: str, comm: int, macs: int = 0) -> None:
        self.ops.append(OpCost(name, comm, macs))

    @property
    def comm_elems(self) -> int:
        return sum(o.comm_elems for o in self.ops)

    @property
    def multiply_adds(self) -> int:
        return sum(o.multiply_adds for o in self.ops)


@dataclass
class LayerCosts:
    cfg: TransformerConfig
    forward: PassCosts
    backward: PassCosts

    def per_rank(self, which: str, lam: float = 1.0) -> Fraction:
        """Average per-rank cost units: (multiply-adds + lam * elements) / P."""
        pc = getattr(self, which)
        lam = Fraction(lam)
        return (pc.multiply_adds + lam * pc.comm_elems) / self.cfg.p**3


def _matmul_comm(p, M, N, K):
    return (p - 1) * (M * N + N * K + M * K)


def _vec_comm(p, n):
    # broadcast to the plane plus all-gather along the weight axis (or the
    # reduce-scatter / reduce pair going back)
    return (p - 1) * n + p * (p - 1) * n


def _linear(fwd: PassCosts, bwd: PassCosts, name, p, T, n_in, n_out):
    fwd.add(f"{name}.matmul", _matmul_comm(p, T, n_in, n_out), T * n_in * n_out)
    fwd.add(f"{name}.bias", _vec_comm(p, n_out))
    bwd.add(f"{name}.bias", _vec_comm(p, n_out))
    bwd.add(f"{name}.matmul", 2 * _matmul_comm(p, T, n_in, n_out), 2 * T * n_in * n_out)


def _layernorm(fwd: PassCosts, bwd: PassCosts, name, p, T, h):
    stats = p * (p - 1) * T  # one value per token, all-reduced over p members
    fwd.add(f"{name}.stats", 2 * stats)
    fwd.add(f"{name}.params", 2 * _vec_comm(p, h))
    bwd.add(f"{name}.params", 2 * _vec_comm(p, h))
    bwd.add(f"{name}.stats", 2 * stats)


def _attention_core(fwd: PassCosts, bwd: PassCosts, p, b, s, n, h):
    T = b * s
    kv = (p - 1) * T * h  # gather of K or V, reduce-scatter of dK or dV
    scores = (p - 1) * b * n * s * s  # one s x s score matrix per head
    rows = p * (p - 1) * b * n * s  # one value per query row and head
    macs = b * s * s * h
    fwd.add("attn.scores", kv + scores, macs)
    fwd.add("attn.softmax", 2 * rows)
    fwd.add("attn.context", scores + kv, macs)
    bwd.add("attn.context", scores + kv, 2 * macs)
    bwd.add("attn.softmax", rows)
    bwd.add("attn.scores", scores + kv, 2 * macs)


def predict_layer_costs(cfg: TransformerConfig) -> LayerCosts:
    """Exact modeled traffic and multiply-adds of ``cfg.layers`` Transformer layers."""
    cfg.validate()
    p, b, s, n, h = cfg.p, cfg.b, cfg.s, cfg.n, cfg.h
    T = b * s
    fwd, bwd = PassCosts(), PassCosts()
    for _ in range(cfg.layers):
        f, g = PassCosts(), PassCosts()
        _layernorm(f, g, "ln1", p, T, h)
        _linear(f, g, "attn.qkv", p, T, h, 3 * h)
        _attention_core(f, g, p, b, s, n, h)
        _linear(f, g, "attn.out", p, T, h, h)
        _layernorm(f, g, "ln2", p, T, h)
        _linear(f, g, "mlp.fc1", p, T, h, 4 * h)
        _linear(f, g, "mlp.fc2", p, T, 4 * h, h)
        fwd.ops += f.ops
        bwd.ops += g.ops[::-1]
    return LayerCosts(cfg, fwd, bwd)
