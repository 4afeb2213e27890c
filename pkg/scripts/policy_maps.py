"""Solve budgeted feedback policies and print their decision maps.

Rows are channel gain (low to high), columns are CSIT error (low to high);
each cell shows the feedback bits chosen in that state.

    python3 scripts/policy_maps.py --dopplers 0.01 0.006 0.002 --budgets 6 24
"""

import argparse

import numpy as np

from fbcontrol.channel import FadingProcess, clarke_rho
from fbcontrol.mdp import build_grid, estimate_kernel, solve_budgeted
from fbcontrol.structure import verify_theorem1

STANDARD_B_SET = tuple(range(0, 31, 2))


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--dopplers", type=float, nargs="+", default=[1e-2, 6e-3, 2e-3])
    ap.add_argument("--budgets", type=float, nargs="+", default=[6.0, 12.0, 24.0, 36.0],
                    help="total feedback bits per user per slot")
    ap.add_argument("--K", type=int, default=3)
    ap.add_argument("--L", type=int, default=4)
    ap.add_argument("--M", type=int, default=16)
    ap.add_argument("--samples", type=int, default=10 ** 6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    grid = build_grid(args.L, STANDARD_B_SET, args.M)
    for j, fd in enumerate(args.dopplers):
        proc = FadingProcess(L=args.L, mode="ar1", rho_c=clarke_rho(fd), seed=0)
        kernel = estimate_kernel(grid, proc, args.samples, np.random.default_rng(args.seed + j))
        for b in args.budgets:
            pol = solve_budgeted(kernel, grid, b / (args.K - 1))
            rep = verify_theorem1(pol)
            print(f"f_d={fd:g}  budget={b:g}  lambda={pol.lam:.4g}  rate/link={pol.avg_rate:.3f}  "
                  f"violations={len(rep.violations)}  boundary_slope={rep.boundary_slope:.3f}")
            for row in pol.table:
                print("   " + " ".join(f"{int(x):2d}" for x in row))
            print()


if __name__ == "__main__":
    main()
