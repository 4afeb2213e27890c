"""Minimum mean interference versus feedback budget under fast fading.

Prints the exact water-filling optimum, the numerical threshold search and
the log2 slope of the curve, which approaches -1/(L-1) bits per bit.

    python3 scripts/highmob_scaling.py --L 4 --budgets 4 8 16 24 32 40
"""

import argparse

import numpy as np

from fbcontrol.highmob import lagrangian_solution, search_threshold


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--L", type=int, default=4)
    ap.add_argument("--K", type=int, default=3)
    ap.add_argument("--budgets", type=float, nargs="+", default=[2, 4, 8, 12, 16, 24, 32, 40])
    ap.add_argument("--search", action="store_true", help="also run the threshold search (slower)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    exact = []
    print(f"{'b_bar':>6} {'I_exact':>11} {'upsilon':>8} {'I_search':>11}")
    for b in args.budgets:
        sol = lagrangian_solution(args.L, b / (args.K - 1))
        exact.append(sol.interference)
        found = search_threshold(args.L, args.K, b, rng=rng).objective if args.search else float("nan")
        print(f"{b:6.1f} {sol.interference:11.4e} {sol.upsilon:8.3f} {found:11.4e}")
    slope = np.polyfit(np.asarray(args.budgets) / (args.K - 1), np.log2(exact), 1)[0]
    print(f"log2 slope per bit per link: {slope:.4f}  (asymptote {-1 / (args.L - 1):.4f})")


if __name__ == "__main__":
    main()
