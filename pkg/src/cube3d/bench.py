"""Weak and strong scaling tables from the analytic layer cost model.

Costs are modeled units, not seconds: per-rank multiply-adds plus ``lam``
times per-rank elements received, averaged over ranks.  The table layout
and the average-step formula follow the usual scaling tables:
``(forward + backward) / batch size``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

from .costs import predict_layer_costs
from .errors import Cube3DError, ConfigInvalid
from .layers import TransformerConfig

CSV_HEADER = ("gpus", "batch", "hidden", "forward_cost", "backward_cost", "avg_step_cost")


def average_step(forward: float, backward: float, batch: int) -> float:
    return (forward + backward) / batch


@dataclass(frozen=True)
class BenchRow:
    gpus: int
    batch_size: int
    hidden_size: int
    forward_cost: float
    backward_cost: float

    @property
    def average_step_cost(self) -> float:
        return average_step(self.forward_cost, self.backward_cost, self.batch_size)


def scaled_config(base: TransformerConfig, p: int, mode: str) -> TransformerConfig:
    """Weak mode grows batch and heads with p and hidden with p**2; strong keeps the shape."""
    if mode == "weak":
        cfg = replace(base, p=p, b=base.b * p, h=base.h * p * p, n=base.n * p)
    elif mode == "strong":
        cfg = replace(base, p=p)
    else:
        raise ConfigInvalid(f"mode must be 'weak' or 'strong', got {mode!r}")
    try:
        return cfg.validate()
    except Cube3DError as exc:
        raise ConfigInvalid(f"{mode} scaling at p={p}: {exc}") from exc


def run_scaling(mode: str, base: TransformerConfig, p_list, lam: float = 1.0) -> list[BenchRow]:
    """One row per cube side in ``p_list`` (``gpus = p**3``)."""
    rows = []
    for p in p_list:
        if p < 1:
            raise ConfigInvalid(f"cube side must be positive, got {p}")
        cfg = scaled_config(base, p, mode)
        lc = predict_layer_costs(cfg)
        rows.append(
            BenchRow(
                p**3,
                cfg.b,
                cfg.h,
                float(lc.per_rank("forward", lam)),
                float(lc.per_rank("backward", lam)),
            )
        )
    return rows


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.gpus, r.batch_size, r.hidden_size, repr(r.forward_cost),
                    repr(r.backward_cost), repr(r.average_step_cost)])
    return buf.getvalue()


def write_csv(rows: list[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="ascii") as f:
        f.write(rows_to_csv(rows))
