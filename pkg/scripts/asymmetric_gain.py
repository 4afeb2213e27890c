"""Gain of interference-aware rate allocation over an equal split.

Compares a memoryless quantizer with an equal bit split against
water-filling feedback with the log-distance rate allocation, at matched
payload, for a symmetric and an asymmetric (d = 1, 3) network.

    python3 scripts/asymmetric_gain.py --totals 4 8 12 16 20
"""

import argparse

import numpy as np
from scipy import optimize

from fbcontrol.highmob import allocate_rates_closed_form, lagrangian_solution
from fbcontrol.netsim import Controlled, NetworkConfig, Simple, run_simulation


def floored_policy(L, rate, g, d):
    """Water-filling policy whose floor-rounded bits average ``rate``."""
    if rate <= 0:
        return lagrangian_solution(L, 0.0)
    f = lambda r: np.floor(lagrangian_solution(L, r).bits(g, d)).mean() - rate   # noqa: E731
    return lagrangian_solution(L, optimize.brentq(f, rate, rate + 3.0, xtol=1e-5))


def compare(total, distances, args, g, d, seed):
    K, L = 3, args.L
    base = dict(K=K, L=L, fading_mode="block_iid", snr_db=(args.snr,), slots=args.slots, trials=args.trials,
                warmup=10, seed=seed, distances=distances, alpha=args.alpha)
    equal = run_simulation(NetworkConfig(scheme=Simple(int(total // (K - 1))), **base))
    rates = allocate_rates_closed_form(distances, args.alpha, L, float(total)).rates
    links = {}
    for m in range(K):
        for n, r in zip([n for n in range(K) if n != m], rates):
            links[(m, n)] = floored_policy(L, r, g, d)
    ctl = run_simulation(NetworkConfig(scheme=Controlled(None, links), **base))
    diff = ctl.trial_throughput[:, 0] - equal.trial_throughput[:, 0]
    return equal.throughput_per_user[0], ctl.throughput_per_user[0], diff.mean() / (diff.std(ddof=1) / np.sqrt(diff.size))


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--totals", type=float, nargs="+", default=[4, 8, 12, 16, 20])
    ap.add_argument("--L", type=int, default=4)
    ap.add_argument("--alpha", type=float, default=3.0)
    ap.add_argument("--snr", type=float, default=13.0)
    ap.add_argument("--slots", type=int, default=400)
    ap.add_argument("--trials", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    g, d = rng.gamma(args.L, 1.0, 4 * 10 ** 5), rng.beta(args.L - 1, 1, 4 * 10 ** 5)
    print(f"{'network':>10} {'total':>6} {'equal':>7} {'waterfill':>9} {'gain':>7} {'z':>6}")
    for name, dist in (("symmetric", [1.0, 1.0]), ("asymmetric", [1.0, 3.0])):
        for i, total in enumerate(args.totals):
            eq, ctl, z = compare(total, dist, args, g, d, args.seed + 100 + i)
            print(f"{name:>10} {total:6.1f} {eq:7.3f} {ctl:9.3f} {100 * (ctl / eq - 1):6.1f}% {z:6.1f}")


if __name__ == "__main__":
    main()
