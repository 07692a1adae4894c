"""Measured vs predicted per-rank traffic of one 3-D matmul as the cube grows.

Runs the forward product for a fixed square shape on p = 1..max cubes and
compares the transport counters with the closed-form prediction.
"""

import argparse
from fractions import Fraction

import numpy as np

from cube3d.collectives import Transport, run_spmd
from cube3d.costs import predict_costs
from cube3d.ops3d import matmul_ab_fwd
from cube3d.sharding import DEFAULT_DIRECTIONS, partition
from cube3d.topology import CubeTopology


def measure(n, p, seed=0):
    rng = np.random.default_rng(seed)
    topo = CubeTopology(p)
    d = DEFAULT_DIRECTIONS
    As = partition(rng.standard_normal((n, n)), "input", topo, d)
    Bs = partition(rng.standard_normal((n, n)), "weight", topo, d)

    def fn(comm):
        matmul_ab_fwd(comm, As[comm.rank], Bs[comm.rank], d)
        return comm.counters.snapshot()

    counters = run_spmd(fn, transport=Transport(topo, "threads"))
    return max(c.elements_received for c in counters), max(c.multiply_adds for c in counters)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=144, help="M = N = K; must be divisible by p**2")
    ap.add_argument("--max-p", type=int, default=4)
    args = ap.parse_args()
    print(f"{'p':>3} {'ranks':>6} {'recv/rank':>10} {'predicted':>10} {'macs/rank':>10} {'ratio prev/this':>18}")
    prev = None
    for p in range(1, args.max_p + 1):
        if args.n % (p * p):
            print(f"{p:>3}  skipped: n={args.n} not divisible by {p * p}")
            continue
        recv, macs = measure(args.n, p)
        pred = predict_costs(args.n, args.n, args.n, p)
        ratio = str(Fraction(prev, recv)) if prev and recv else "-"
        print(f"{p:>3} {p**3:>6} {recv:>10} {pred.per_rank_comm_elems:>10} {macs:>10} {ratio:>18}")
        prev = recv


if __name__ == "__main__":
    main()
