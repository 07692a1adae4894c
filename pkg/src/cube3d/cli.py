"""Command line: ``cube3d {verify,bench,matmul}``.

Exit codes: 0 success, 1 a verification check failed, 2 bad usage or an
invalid configuration.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import matfile
from .bench import rows_to_csv, run_scaling, write_csv
from .collectives import SCHEDULES, run_spmd
from .errors import Cube3DError
from .layers import TransformerConfig
from .ops3d import FORWARD, operand_layouts
from .sharding import DEFAULT_DIRECTIONS, collect, partition
from .topology import CubeTopology
from .verify import DTYPES, VerifyConfig, format_report, run_verify

BENCH_DEFAULTS = {
    # base shape at p = 1, grown with p
    "weak": dict(batch=2, seq=12, hidden=4, heads=1),
    # fixed shape, divisible for p in 1..4
    "strong": dict(batch=24, seq=24, hidden=144, heads=12),
}


def _p_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"cube sides must be positive: {text!r}")
    return vals


def _model_flags(ap: argparse.ArgumentParser, defaults: dict | None = None) -> None:
    d = defaults or {}
    ap.add_argument("--batch", type=int, default=d.get("batch"))
    ap.add_argument("--seq", type=int, default=d.get("seq"))
    ap.add_argument("--hidden", type=int, default=d.get("hidden"))
    ap.add_argument("--heads", type=int, default=d.get("heads"))
    ap.add_argument("--layers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cube3d", description="3-D tensor parallelism on a simulated processor cube")
    sub = ap.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the oracle / gradient / counter suite")
    v.add_argument("--p", type=int, default=2, help="cube side (p**3 ranks)")
    _model_flags(v, dict(batch=2, seq=8, hidden=16, heads=2))
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--dtype", choices=sorted(DTYPES), default="f64")
    v.add_argument("--schedule", choices=SCHEDULES, default="threads")
    v.add_argument("--fd-samples", type=int, default=4,
                   help="finite-difference coordinates per parameter tensor")
    v.add_argument("--out", type=Path, help="also write the report here")

    b = sub.add_parser("bench", help="modeled weak/strong scaling table as CSV")
    b.add_argument("--mode", choices=("weak", "strong"), default="weak")
    b.add_argument("--p-list", type=_p_list, default=[1, 2], help="cube sides, e.g. 1,2,4")
    _model_flags(b)
    b.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="cost units per element received")
    b.add_argument("--out", type=Path, help="CSV path (stdout if omitted)")

    m = sub.add_parser("matmul", help="3-D product of two matrix files")
    m.add_argument("--form", choices=("ab", "abt", "atb"), default="ab")
    m.add_argument("--a", type=Path, required=True)
    m.add_argument("--b", type=Path, required=True)
    m.add_argument("--p", type=int, default=2)
    m.add_argument("--out", type=Path, required=True)
    m.add_argument("--schedule", choices=SCHEDULES, default="threads")
    return ap


def cmd_verify(args) -> int:
    vc = VerifyConfig(p=args.p, batch=args.batch, seq=args.seq, hidden=args.hidden,
                      heads=args.heads, layers=args.layers, seed=args.seed, dtype=args.dtype,
                      schedule=args.schedule, fd_samples=args.fd_samples)
    results = run_verify(vc)
    report = format_report(vc, results)
    sys.stdout.write(report)
    if args.out:
        args.out.write_text(report)
    return 0 if all(r.passed for r in results) else 1


def cmd_bench(args) -> int:
    d = BENCH_DEFAULTS[args.mode]
    pick = lambda name: getattr(args, name) if getattr(args, name) is not None else d[name]  # noqa: E731
    base = TransformerConfig(b=pick("batch"), s=pick("seq"), n=pick("heads"), h=pick("hidden"),
                             p=1, layers=args.layers)
    rows = run_scaling(args.mode, base, args.p_list, args.lam)
    if args.out:
        write_csv(rows, args.out)
    else:
        sys.stdout.write(rows_to_csv(rows))
    return 0


def cmd_matmul(args) -> int:
    a, b = matfile.load(args.a), matfile.load(args.b)
    topo = CubeTopology(args.p)
    d = DEFAULT_DIRECTIONS
    la, lb, _ = operand_layouts(args.form, d)
    As = partition(a, la, topo, d)
    Bs = partition(b, lb, topo, d)
    fwd = FORWARD[args.form]
    shards = run_spmd(lambda comm: fwd(comm, As[comm.rank], Bs[comm.rank], d), topo,
                      schedule=args.schedule)
    matfile.save(args.out, collect(shards))
    return 0


COMMANDS = {"verify": cmd_verify, "bench": cmd_bench, "matmul": cmd_matmul}


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (Cube3DError, matfile.MatrixFileError, OSError) as exc:
        print(f"cube3d {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
