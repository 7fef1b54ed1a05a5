#!/usr/bin/env python3
"""Ring-collective cost tables: factored per-dim reduction vs fused-group.

Evaluates T_vanilla = 2SB * sum_i (P_i-1)/P_i against
T_fused = 2SB * (prod P_i - 1)/prod P_i with exact rational arithmetic, then
cross-checks the simulated ledger byte accounting against the formula.
"""
import argparse
import itertools
import math
from fractions import Fraction

import numpy as np

from spmdsim.comm import CollectiveLedger, CostParams, all_reduce, cost_model_eval


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--payload", type=int, default=4096, help="S in bytes")
    ap.add_argument("--bandwidth-inv", type=int, default=10 ** 9,
                    help="B is 1/this (seconds per byte)")
    args = ap.parse_args()

    S, B = args.payload, Fraction(1, args.bandwidth_inv)
    print(f"{'mesh dims':<16} {'T_vanilla':>12} {'T_fused':>12} {'ratio':>8}")
    for N in (1, 2, 3):
        for counts in itertools.product((2, 4, 8), repeat=N):
            tv, tf, ratio = cost_model_eval(CostParams(S, B, counts))
            dims = "x".join(str(c) for c in counts)
            print(f"{dims:<16} {float(tv):12.4e} {float(tf):12.4e} {float(ratio):8.4f}")

    print("\nasymptotic ratio at P_i = 2^10:")
    for N in (1, 2, 3):
        _, _, ratio = cost_model_eval(CostParams(S, B, tuple([1 << 10] * N)))
        print(f"  N={N}: ratio = {float(ratio):.6f} (limit {N})")

    print("\nledger cross-check (bytes per device vs 2S(P-1)/P):")
    for P in (2, 4, 8):
        n = args.payload // 8
        ledger = CollectiveLedger()
        all_reduce([np.ones(n) for _ in range(P)], ledger)
        got = ledger.entries[-1].bytes_per_device
        expect = Fraction(2 * n * 8 * (P - 1), P)
        print(f"  P={P}: ledger={float(got):10.1f}  formula={float(expect):10.1f}"
              f"  exact match: {got == expect}")


if __name__ == "__main__":
    main()
