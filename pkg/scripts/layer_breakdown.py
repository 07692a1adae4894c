"""Per-op traffic and multiply-adds of one Transformer layer, checked against a run.

    python3 scripts/layer_breakdown.py --p 2 --batch 2 --seq 8 --hidden 16 --heads 2
"""

import argparse

import numpy as np

from cube3d.costs import predict_layer_costs
from cube3d.layers import TransformerConfig, init_layer_params
from cube3d.verify import simulate_transformer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--p", type=int, default=2)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--seq", type=int, default=8)
    ap.add_argument("--hidden", type=int, default=16)
    ap.add_argument("--heads", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = TransformerConfig(b=args.batch, s=args.seq, n=args.heads, h=args.hidden, p=args.p).validate()
    lc = predict_layer_costs(cfg)
    for which, pc in (("forward", lc.forward), ("backward", lc.backward)):
        print(f"{which}: elements received / multiply-adds, summed over {cfg.p ** 3} ranks")
        for op in pc.ops:
            print(f"  {op.name:<14} {op.comm_elems:>10} {op.multiply_adds:>12}")
        print(f"  {'total':<14} {pc.comm_elems:>10} {pc.multiply_adds:>12}")

    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((cfg.b, cfg.s, cfg.h))
    run = simulate_transformer(cfg, [init_layer_params(cfg, rng)], x, rng.standard_normal(x.shape))
    print(f"measured: forward {run.forward_received} / {run.forward_macs}, "
          f"backward {run.backward_received} / {run.backward_macs}")
    match = (run.forward_received, run.backward_received) == (lc.forward.comm_elems, lc.backward.comm_elems)
    print("traffic matches model" if match else "MISMATCH between model and counters")


if __name__ == "__main__":
    main()
