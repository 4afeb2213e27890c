"""Command-line experiment runner.

    fbcontrol solve-policy     --config cfg.json --out DIR
    fbcontrol simulate         --config cfg.json --out DIR --threads 4
    fbcontrol waterfill        --config cfg.json --out DIR
    fbcontrol allocate-rates   --config cfg.json --out DIR
    fbcontrol verify-structure --policy DIR/policy.csv --out DIR

Exit codes: 0 success, 1 structural verification failed, 2 configuration error.
Every CSV starts with a ``#`` line carrying the config hash and the seed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import highmob, netsim
from .channel import FadingProcess, clarke_rho
from .config import (ConfigError, ExperimentConfig, header_line, load_config, read_policy_csv,
                     write_csv, write_policy_csv)
from .mdp import decision_indices, estimate_kernel, evaluate_policy, solve_budgeted, value_iteration
from .structure import StructureReport, check_value_structure, verify_theorem1

log = logging.getLogger("fbcontrol")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG = 0, 1, 2


def derived_seed(seed: int, *path: int) -> int:
    """Independent 64-bit seed for a sub-task, stable under reordering of tasks."""
    return int(np.random.SeedSequence([int(seed), *path]).generate_state(1, np.uint64)[0])


def kernel_for(cfg: ExperimentConfig, grid, f_d: float, tag: int = 0):
    proc = FadingProcess(L=cfg.L, mode=cfg.fading_mode, rho_c=clarke_rho(f_d), seed=0)
    rng = np.random.default_rng(derived_seed(cfg.seed, 1, tag))
    return estimate_kernel(grid, proc, cfg.kernel_samples, rng)


def _out_dir(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ------------------------------------------------------------------ solve-policy


def cmd_solve_policy(cfg: ExperimentConfig, allow_violations: bool = False) -> int:
    grid = cfg.grid()
    kernel = kernel_for(cfg, grid, cfg.f_d)
    pol = solve_budgeted(kernel, grid, cfg.b_bar / (cfg.K - 1), rate_tol=cfg.rate_tol, lam_tol=cfg.lam_tol)
    avg, U, _, _ = evaluate_policy(decision_indices(pol.table, grid), kernel, grid, pol.lam)
    pol.avg_cost = float(avg)
    rep = verify_theorem1(pol)
    if cfg.value_checks:
        vf, _ = value_iteration(kernel, grid, pol.lam, cfg.discount)
        check_value_structure(vf, kernel, grid, pol.lam, rep)
    out = _out_dir(cfg)
    write_policy_csv(out / "policy.csv", pol, U, cfg, b_bar=cfg.b_bar, f_d=cfg.f_d)
    _write_report(out, cfg, rep, "solve-policy")
    sys.stdout.write(f"lambda={pol.lam:.6g} rate_per_link={pol.avg_rate:.4f} decisions={pol.num_decisions}\n")
    sys.stdout.write(rep.to_text())
    return EXIT_OK if rep.ok or allow_violations else EXIT_VERIFY


def _write_report(out: Path, cfg: ExperimentConfig, rep: StructureReport, command: str) -> None:
    hdr = header_line(command, cfg)
    (out / "structure_report.txt").write_text(hdr + rep.to_text())
    (out / "violations.csv").write_text(hdr + rep.violations_csv())


def cmd_verify_structure(cfg: ExperimentConfig, policy_path: str, allow_violations: bool = False) -> int:
    try:
        pol, _, _ = read_policy_csv(policy_path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load policy: {exc}", None, str(policy_path)) from None
    rep = verify_theorem1(pol)
    _write_report(_out_dir(cfg), cfg, rep, "verify-structure")
    sys.stdout.write(rep.to_text())
    return EXIT_OK if rep.ok or allow_violations else EXIT_VERIFY


# ------------------------------------------------------------------ simulate


SIM_COLUMNS = ["axis", "x", "scheme", "snr_db", "throughput_mean", "throughput_stderr",
               "avg_interference", "feedback_rate", "overhead", "csit_error", "decisions"]


def _network(cfg: ExperimentConfig, x: float, seed: int) -> netsim.NetworkConfig:
    snr = [x] if cfg.sweep_axis == "snr" else cfg.snr_db
    f_d = x if cfg.sweep_axis == "f_d" else cfg.f_d
    return netsim.NetworkConfig(K=cfg.K, L=cfg.L, B_set=tuple(cfg.B_set), snr_db=tuple(snr), f_d=f_d,
                                fading_mode=cfg.fading_mode, distances=cfg.distances, alpha=cfg.alpha,
                                slots=cfg.slots, trials=cfg.trials, seed=seed, warmup=cfg.warmup,
                                quantizer=cfg.quantizer)


def _budget(cfg: ExperimentConfig, x: float) -> float:
    return x if cfg.sweep_axis == "b_bar" else cfg.b_bar


def cmd_simulate(cfg: ExperimentConfig, threads: Optional[int] = None) -> int:
    """Run every scheme at every sweep point.

    An SNR sweep is one simulation per scheme evaluated at all SNRs (identical
    channel draws, so throughput is monotone in SNR by construction). Other
    axes give every point its own derived seed, shared by all schemes.
    """
    threads = threads or os.cpu_count() or 1
    points = cfg.sweep
    grid = cfg.grid() if "controlled" in cfg.schemes else None
    if cfg.sweep_axis == "snr":
        tasks = [(0, None)]
    else:
        tasks = [(i, x) for i, x in enumerate(points)]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        kernels = {}
        if grid is not None:
            fds = sorted({x for _, x in tasks} if cfg.sweep_axis == "f_d" else {cfg.f_d})
            futs = {fd: pool.submit(kernel_for, cfg, grid, fd, j) for j, fd in enumerate(fds)}
            kernels = {fd: f.result() for fd, f in futs.items()}

        def run(i, x, scheme_name):
            net = _network(cfg, points[0] if x is None else x, derived_seed(cfg.seed, 2, i))
            if x is None:
                net = replace(net, snr_db=tuple(points))
            b = _budget(cfg, points[0] if x is None else x)
            per_link = int(b // (cfg.K - 1))
            if scheme_name == "perfect":
                scheme = netsim.PerfectCsit()
            elif scheme_name == "simple":
                scheme = netsim.Simple(per_link)
            elif scheme_name == "differential":
                nu = cfg.differential_nu
                if nu is None:
                    nu = netsim.tune_differential_nu(net, per_link)
                scheme = netsim.Differential(per_link, float(nu))
            else:
                pol, _ = netsim.controlled_policy_for_total(kernels[net.f_d], grid, b, cfg.K)
                scheme = netsim.Controlled(pol)
            return netsim.run_simulation(replace(net, scheme=scheme))

        futs = [[pool.submit(run, i, x, s) for s in cfg.schemes] for i, x in tasks]
        rows = []
        for (i, x), row in zip(tasks, futs):
            for f in row:
                res = f.result()
                stderr = res.throughput_halfwidth / netsim.Z95
                for j, snr in enumerate(res.snr_db):
                    xv = snr if x is None else x
                    rows.append([cfg.sweep_axis, xv, res.scheme, snr, res.throughput_per_user[j], stderr[j],
                                 res.avg_interference_per_rx, res.avg_feedback_rate, res.overhead_per_user,
                                 res.avg_csit_error, res.decisions])
    if cfg.sweep_axis == "snr":
        order = {s: k for k, s in enumerate(netsim.scheme_name(_proto(s)) for s in cfg.schemes)}
        rows.sort(key=lambda r: (r[1], order[r[2]]))
    write_csv(_out_dir(cfg) / "simulate.csv", header_line("simulate", cfg), SIM_COLUMNS, rows)
    return EXIT_OK


def _proto(name: str):
    return {"perfect": netsim.PerfectCsit(), "simple": netsim.Simple(), "differential": netsim.Differential(),
            "controlled": netsim.Controlled(None)}[name]


# ------------------------------------------------------------------ high mobility


def cmd_waterfill(cfg: ExperimentConfig) -> int:
    r = cfg.b_bar / (cfg.K - 1)
    g = np.geomspace(0.05, 20.0, cfg.waterfill_points)
    if cfg.waterfill_method == "search" and r > 0:
        pol = highmob.search_threshold(cfg.L, cfg.K, cfg.b_bar, rng=np.random.default_rng(derived_seed(cfg.seed, 3)))
        psi, ups, obj = pol.psi_at(g), pol.upsilon, pol.objective
    else:
        sol = highmob.lagrangian_solution(cfg.L, r)
        psi, ups, obj = sol.psi(g), sol.upsilon, sol.interference
    with np.errstate(invalid="ignore"):
        bits = np.maximum(0.0, ups - (cfg.L - 1) * np.log2(1.0 / g)) if np.isfinite(ups) else np.zeros_like(g)
    hdr = header_line("waterfill", cfg, method=cfg.waterfill_method, b_bar=cfg.b_bar,
                      upsilon=float(ups), I_min=float(obj))
    write_csv(_out_dir(cfg) / "waterfill.csv", hdr, ["g", "psi", "bits"], zip(g, psi, bits))
    return EXIT_OK


def _link_distances(cfg: ExperimentConfig):
    """(receiver, transmitter, distance) for every cross link."""
    d = netsim.NetworkConfig(K=cfg.K, L=cfg.L, distances=cfg.distances).distance_matrix()
    return [[(m, n, d[m, n]) for n in range(cfg.K) if n != m] for m in range(cfg.K)]


def cmd_allocate_rates(cfg: ExperimentConfig) -> int:
    if cfg.b_bar < 0:
        raise ConfigError("infeasible budget: rates are nonnegative and sum to b_bar, so b_bar >= 0")
    curve = None
    if cfg.allocation_method == "exact_curve":
        b = np.linspace(0.0, max(cfg.b_bar, 1e-9), 401)
        vals = np.array([highmob.lagrangian_solution(cfg.L, x).interference for x in b])
        curve = lambda x: float(np.interp(x, b, vals))
    rows = []
    for links in _link_distances(cfg):
        d = np.array([x[2] for x in links])
        if curve is None:
            alloc = highmob.allocate_rates_closed_form(d, cfg.alpha, cfg.L, cfg.b_bar)
            unclamped = alloc.unclamped
        else:
            alloc = highmob.allocate_rates_general(d, cfg.alpha, cfg.L, cfg.b_bar, curve)
            unclamped = alloc.rates
        for (m, n, dist), rate, u in zip(links, alloc.rates, unclamped):
            rows.append([m, n, dist, rate, u])
    hdr = header_line("allocate-rates", cfg, method=cfg.allocation_method, b_bar=cfg.b_bar, alpha=cfg.alpha)
    write_csv(_out_dir(cfg) / "rates.csv", hdr, ["receiver", "transmitter", "distance", "rate", "unclamped"], rows)
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fbcontrol", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("solve-policy", "simulate", "waterfill", "allocate-rates", "verify-structure"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults when omitted)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides seed)")
        p.add_argument("--threads", type=int, default=os.cpu_count(), help="worker threads")
        p.add_argument("--allow-violations", action="store_true",
                       help="exit 0 even if the policy structure check fails")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "verify-structure":
            p.add_argument("--policy", required=True, help="policy CSV written by solve-policy")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
        if args.command == "solve-policy":
            return cmd_solve_policy(cfg, args.allow_violations)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.threads)
        if args.command == "waterfill":
            return cmd_waterfill(cfg)
        if args.command == "allocate-rates":
            return cmd_allocate_rates(cfg)
        return cmd_verify_structure(cfg, args.policy, args.allow_violations)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except (highmob.InfeasibleBudgetError, highmob.NonconvexCurveError) as exc:
        sys.stderr.write(f"infeasible problem: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
