"""Throughput per user versus total feedback rate at a fixed SNR.

Thin wrapper around ``fbcontrol simulate`` with a b_bar sweep.

    python3 scripts/rate_sweep.py --out out/rate --f-d 0.006
"""

import argparse
import json
import sys
from pathlib import Path

from fbcontrol.cli import main as cli_main
from fbcontrol.config import read_table_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--out", default="out/rate_sweep")
    ap.add_argument("--f-d", type=float, default=1e-2)
    ap.add_argument("--snr", type=float, default=13.0)
    ap.add_argument("--totals", type=float, nargs="+", default=[4, 8, 12, 16, 20])
    ap.add_argument("--slots", type=int, default=600)
    ap.add_argument("--trials", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dict(f_d=args.f_d, snr_db=[args.snr], sweep_axis="b_bar", sweep_values=args.totals,
               slots=args.slots, trials=args.trials, warmup=300)
    (out / "config.json").write_text(json.dumps(cfg, indent=1))
    code = cli_main(["simulate", "--config", str(out / "config.json"), "--out", str(out),
                     "--seed", str(args.seed), "--threads", str(args.threads)])
    if code:
        sys.exit(code)
    _, rows = read_table_csv(out / "simulate.csv")
    print(f"{'total':>6} {'scheme':>13} {'bit/s/Hz':>9} {'+-':>6} {'fb rate':>8} {'csit err':>9}")
    for r in rows:
        print(f"{float(r['x']):6.1f} {r['scheme']:>13} {float(r['throughput_mean']):9.3f} "
              f"{float(r['throughput_stderr']):6.3f} {float(r['feedback_rate']):8.2f} {float(r['csit_error']):9.4f}")


if __name__ == "__main__":
    main()
