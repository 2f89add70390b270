#!/usr/bin/env python3
"""Print the per-block adapter flop comparison and the depth-doubling sweep.

    python3 scripts/flops_sweep.py --dim 768 --rank 96
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from tpmamba.flops import ADAPTER_KINDS, flops_sweep, gflops_estimate  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--input", default="96,96,96")
    ap.add_argument("--dim", type=int, default=768)
    ap.add_argument("--rank", type=int, default=96)
    ap.add_argument("--doublings", type=int, default=4)
    args = ap.parse_args()
    dhw = tuple(int(t) for t in args.input.split(","))

    print(f"input {dhw}, width {args.dim}, rank {args.rank}")
    for kind in ADAPTER_KINDS:
        print(f"  {kind:>15}: {gflops_estimate(kind, dhw, args.dim, args.rank):10.4f} GFlops/block")

    print("\ndepth-doubling sweep (GFlops/block):")
    rows = flops_sweep(dhw, args.dim, args.rank, doublings=args.doublings)
    header = f"{'D':>6} {'tokens':>9}" + "".join(f"{k:>16}" for k in ADAPTER_KINDS)
    print(header)
    for row in rows:
        line = f"{row['D']:>6} {row['tokens']:>9}" + "".join(
            f"{row[k]:>16.3f}" for k in ADAPTER_KINDS
        )
        print(line)
    sa_over_tp = [row["sa_adapter"] / row["tp_mamba"] for row in rows]
    print("\nsa_adapter / tp_mamba ratio:", " -> ".join(f"{r:.1f}" for r in sa_over_tp))


if __name__ == "__main__":
    main()
