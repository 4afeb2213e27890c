"""Throughput per user versus SNR for every feedback scheme.

Thin wrapper around ``fbcontrol simulate`` with an SNR sweep.

    python3 scripts/snr_sweep.py --out out/snr --f-d 0.01 --b-bar 12
"""

import argparse
import json
import sys
from pathlib import Path

from fbcontrol.cli import main as cli_main
from fbcontrol.config import read_table_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--out", default="out/snr_sweep")
    ap.add_argument("--f-d", type=float, default=1e-2)
    ap.add_argument("--b-bar", type=float, default=12.0, help="total feedback bits per user per slot")
    ap.add_argument("--snr", type=float, nargs="+", default=[0, 5, 10, 15, 20, 25, 30, 35])
    ap.add_argument("--slots", type=int, default=600)
    ap.add_argument("--trials", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dict(f_d=args.f_d, b_bar=args.b_bar, sweep_axis="snr", sweep_values=args.snr,
               slots=args.slots, trials=args.trials, warmup=300)
    (out / "config.json").write_text(json.dumps(cfg, indent=1))
    code = cli_main(["simulate", "--config", str(out / "config.json"), "--out", str(out),
                     "--seed", str(args.seed), "--threads", str(args.threads)])
    if code:
        sys.exit(code)
    _, rows = read_table_csv(out / "simulate.csv")
    print(f"{'snr_db':>7} {'scheme':>13} {'bit/s/Hz':>9} {'fb rate':>8}")
    for r in rows:
        print(f"{float(r['x']):7.1f} {r['scheme']:>13} {float(r['throughput_mean']):9.3f} "
              f"{float(r['feedback_rate']):8.2f}")


if __name__ == "__main__":
    main()
