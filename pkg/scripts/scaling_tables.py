"""Modeled weak and strong scaling tables, written as CSV and echoed as text.

    python3 scripts/scaling_tables.py --p-list 1,2,3,4 --outdir results
"""

import argparse
from pathlib import Path

from cube3d.bench import run_scaling, write_csv
from cube3d.cli import BENCH_DEFAULTS
from cube3d.layers import TransformerConfig


def base_config(mode: str, layers: int) -> TransformerConfig:
    d = BENCH_DEFAULTS[mode]
    return TransformerConfig(b=d["batch"], s=d["seq"], n=d["heads"], h=d["hidden"], p=1, layers=layers)


def show(mode, rows):
    print(f"{mode} scaling (modeled cost units per rank, not seconds)")
    print(f"{'gpus':>5} {'batch':>6} {'hidden':>7} {'forward':>14} {'backward':>14} {'avg step':>12}")
    for r in rows:
        print(f"{r.gpus:>5} {r.batch_size:>6} {r.hidden_size:>7} {r.forward_cost:>14.1f} "
              f"{r.backward_cost:>14.1f} {r.average_step_cost:>12.2f}")
    print()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--p-list", default="1,2,3,4", help="cube sides")
    ap.add_argument("--layers", type=int, default=1)
    ap.add_argument("--lambda", dest="lam", type=float, default=1.0)
    ap.add_argument("--outdir", type=Path, default=Path("results"))
    args = ap.parse_args()
    p_list = [int(t) for t in args.p_list.split(",")]
    args.outdir.mkdir(parents=True, exist_ok=True)
    for mode in ("weak", "strong"):
        rows = run_scaling(mode, base_config(mode, args.layers), p_list, args.lam)
        write_csv(rows, args.outdir / f"{mode}_scaling.csv")
        show(mode, rows)


if __name__ == "__main__":
    main()
