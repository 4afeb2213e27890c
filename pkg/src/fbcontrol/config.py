"""Experiment configuration files and CSV artifacts.

A configuration is one JSON object whose keys are the fields of
:class:`ExperimentConfig`; every key is optional and the defaults reproduce
the standard setting (L = 4, K = 3, B in {0, 2, ..., 30}, 16 x 16 grids,
13 dB). Unknown keys and malformed values are rejected with the line of the
offending entry.

Schema (type, default):

========================  =========================================================
K, L                      int, 3 and 4: users and transmit antennas
B_set                     list[int], [0, 2, ..., 30]: feedback decisions (bits)
snr_db                    list[float], [13.0]
f_d                       float, 0.01: normalized Doppler; AR(1) with rho = J0(2 pi f_d)
fading_mode               "ar1" | "block_iid"
distances                 null | K-1 list | K x K matrix
alpha                     float, 3.0: path-loss exponent
quantizer                 "sphere_cap" | "rvq"
slots, trials, warmup     int, 1000, 50, 100
seed                      int, 0
b_bar                     float, 12.0: per-user feedback budget (bits/slot, K-1 links)
schemes                   list of "perfect" | "simple" | "differential" | "controlled"
differential_nu           null (tuned by grid search) | float
sweep_axis                "snr" | "b_bar" | "f_d"
sweep_values              nonempty ascending list; empty means the single config value
M                         int, 16: gain bins
N                         int or null: error bins, always len(B_set)
kernel_samples            int, 1000000
rate_tol, lam_tol         float, 0.05 and 1e-6: budget bisection tolerances
discount                  float, 0.999: discount for value-function checks
value_checks              bool, true: compute the discounted value statistics
waterfill_method          "exact" | "search"
waterfill_points          int, 41: gains tabulated by ``waterfill``
allocation_method         "closed_form" | "exact_curve"
out_dir                   str, "out"
========================  =========================================================
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .channel import FadingMode
from .mdp import Policy, StateGrid, build_grid
from .quantizer import QuantizerKind, QuantizerModel

SCHEMES = ("perfect", "simple", "differential", "controlled")
AXES = ("snr", "b_bar", "f_d")
MAX_DIFFERENTIAL_BITS = 12
POLICY_COLUMNS = ["g_index", "d_index", "g_point", "d_point", "B", "value"]


class ConfigError(ValueError):
    """A configuration problem; ``line`` is the 1-based line in the source, if known."""

    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        super().__init__(message)
        self.message = message
        self.line = line
        self.source = source

    def __str__(self) -> str:
        where = f"{self.source}:{self.line}" if self.line else self.source
        return f"{where}: {self.message}"


@dataclass
class ExperimentConfig:
    K: int = 3
    L: int = 4
    B_set: list = field(default_factory=lambda: list(range(0, 31, 2)))
    snr_db: list = field(default_factory=lambda: [13.0])
    f_d: float = 1e-2
    fading_mode: str = "ar1"
    distances: Optional[Any] = None
    alpha: float = 3.0
    quantizer: str = "sphere_cap"
    slots: int = 1000
    trials: int = 50
    warmup: int = 100
    seed: int = 0
    b_bar: float = 12.0
    schemes: list = field(default_factory=lambda: ["perfect", "simple", "differential", "controlled"])
    differential_nu: Optional[float] = None
    sweep_axis: str = "snr"
    sweep_values: list = field(default_factory=list)
    M: int = 16
    N: Optional[int] = None
    kernel_samples: int = 10 ** 6
    rate_tol: float = 0.05
    lam_tol: float = 1e-6
    discount: float = 0.999
    value_checks: bool = True
    waterfill_method: str = "exact"
    waterfill_points: int = 41
    allocation_method: str = "closed_form"
    out_dir: str = "out"

    def validate(self) -> None:
        """Raise ConfigError (naming the field) on any inconsistency."""
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}", getattr(self, "_lines", {}).get(name))

        for name in ("K", "L", "M", "slots", "trials", "warmup", "seed", "kernel_samples", "waterfill_points"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                bad(name, f"expected an integer, got {v!r}")
        if self.K < 2:
            bad("K", "need at least 2 users")
        if self.L < self.K:
            bad("L", "zero-forcing needs L >= K")
        if self.M < 2:
            bad("M", "need at least 2 gain bins")
        if self.slots < 1 or self.trials < 1:
            bad("slots", "slots and trials must be positive")
        if self.warmup < 0:
            bad("warmup", "must be nonnegative")
        if self.seed < 0 or self.seed >= 2 ** 64:
            bad("seed", "must be an unsigned 64-bit integer")
        if self.kernel_samples < 1000:
            bad("kernel_samples", "need at least 1000 samples")
        if self.waterfill_points < 1:
            bad("waterfill_points", "must be positive")
        if not isinstance(self.B_set, list) or not all(isinstance(b, int) and not isinstance(b, bool)
                                                       for b in self.B_set):
            bad("B_set", "expected a list of integers")
        if not self.B_set or 0 not in self.B_set or len(set(self.B_set)) != len(self.B_set) or min(self.B_set) < 0:
            bad("B_set", "must hold distinct nonnegative integers including 0")
        if self.N is not None and self.N != len(self.B_set):
            bad("N", "error bins sit at the mean quantization errors, so N must equal len(B_set)")
        for name in ("f_d", "alpha", "b_bar", "rate_tol", "lam_tol", "discount"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
                bad(name, f"expected a finite number, got {v!r}")
        if not 0.0 <= self.f_d < 0.5:
            bad("f_d", "must lie in [0, 0.5)")
        if self.b_bar < 0:
            bad("b_bar", "feedback budget must be nonnegative")
        if self.rate_tol <= 0 or self.lam_tol <= 0:
            bad("rate_tol", "tolerances must be positive")
        if not 0.0 < self.discount < 1.0:
            bad("discount", "must lie in (0, 1)")
        if not isinstance(self.snr_db, list) or not self.snr_db:
            bad("snr_db", "expected a nonempty list of numbers")
        for name, enum_ in (("fading_mode", FadingMode), ("quantizer", QuantizerKind)):
            try:
                enum_(getattr(self, name))
            except ValueError:
                bad(name, f"must be one of {[e.value for e in enum_]}")
        if not isinstance(self.schemes, list) or not self.schemes or any(s not in SCHEMES for s in self.schemes):
            bad("schemes", f"expected a nonempty list drawn from {list(SCHEMES)}")
        if len(set(self.schemes)) != len(self.schemes):
            bad("schemes", "duplicate scheme")
        if self.differential_nu is not None and not (0.0 < float(self.differential_nu) < 1.0):
            bad("differential_nu", "must lie in (0, 1) or be null")
        if self.sweep_axis not in AXES:
            bad("sweep_axis", f"must be one of {list(AXES)}")
        if not isinstance(self.sweep_values, list):
            bad("sweep_values", "expected a list")
        vals = [float(v) for v in self.sweep_values]
        if any(b <= a for a, b in zip(vals, vals[1:])):
            bad("sweep_values", "must be strictly ascending")
        if self.sweep_axis == "b_bar" and vals and vals[0] < 0:
            bad("sweep_values", "feedback budgets must be nonnegative")
        if self.sweep_axis == "f_d" and vals and not (0.0 <= vals[0] and vals[-1] < 0.5):
            bad("sweep_values", "Doppler values must lie in [0, 0.5)")
        if "differential" in self.schemes:
            top = max(vals) if (vals and self.sweep_axis == "b_bar") else self.b_bar
            if top // (self.K - 1) > MAX_DIFFERENTIAL_BITS:
                bad("b_bar", f"differential codebooks are limited to {MAX_DIFFERENTIAL_BITS} bits per link")
        if self.waterfill_method not in ("exact", "search"):
            bad("waterfill_method", "must be 'exact' or 'search'")
        if self.allocation_method not in ("closed_form", "exact_curve"):
            bad("allocation_method", "must be 'closed_form' or 'exact_curve'")
        if self.distances is not None:
            d = np.asarray(self.distances, dtype=float) if _numeric(self.distances) else None
            if d is None or d.shape not in ((self.K - 1,), (self.K, self.K)):
                bad("distances", f"expected null, a list of {self.K - 1} numbers or a {self.K}x{self.K} matrix")
            off = d if d.ndim == 1 else d[~np.eye(self.K, dtype=bool)]
            if np.any(off <= 0):
                bad("distances", "must be positive")

    @property
    def sweep(self) -> list:
        """Sweep points; an empty list means the single configured value."""
        if self.sweep_values:
            return [float(v) for v in self.sweep_values]
        return {"snr": [float(self.snr_db[0])], "b_bar": [float(self.b_bar)], "f_d": [float(self.f_d)]}[self.sweep_axis]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def config_hash(self) -> str:
        """sha256 of the canonical JSON of every field except the output directory."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def grid(self) -> StateGrid:
        return build_grid(self.L, self.B_set, self.M, QuantizerModel(self.quantizer, self.L))


def _numeric(x) -> bool:
    try:
        np.asarray(x, dtype=float)
        return True
    except (TypeError, ValueError):
        return False


def _key_lines(text: str) -> dict:
    """Line of the first occurrence of every top-level-looking key."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        for m in re.finditer(r'"([^"\\]+)"\s*:', line):
            out.setdefault(m.group(1), lineno)
    return out


_INT_FIELDS = {"K", "L", "M", "slots", "trials", "warmup", "seed", "kernel_samples", "waterfill_points"}


def config_from_text(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno, source) from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", 1, source)
    lines = _key_lines(text)
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown key {key!r}", lines.get(key), source)
    kw = dict(raw)
    for key in ("snr_db", "sweep_values"):
        if key in kw and isinstance(kw[key], (int, float)) and not isinstance(kw[key], bool):
            kw[key] = [kw[key]]
    for key in _INT_FIELDS:
        # accept 1e6-style integral floats for counts
        v = kw.get(key)
        if isinstance(v, float) and v.is_integer():
            kw[key] = int(v)
    for key in ("snr_db", "sweep_values"):
        if isinstance(kw.get(key), list):
            try:
                kw[key] = [float(v) for v in kw[key]]
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: expected numbers", lines.get(key), source) from None
    for key in ("f_d", "alpha", "b_bar", "rate_tol", "lam_tol", "discount"):
        if isinstance(kw.get(key), int) and not isinstance(kw.get(key), bool):
            kw[key] = float(kw[key])
    cfg = ExperimentConfig(**kw)
    cfg._lines = lines
    try:
        cfg.validate()
    except ConfigError as exc:
        exc.source = source
        raise
    return cfg


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    return config_from_text(text, str(path))


# ------------------------------------------------------------------ CSV artifacts


def fmt(x) -> str:
    """Shortest round-tripping text for a number."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def header_line(command: str, cfg: ExperimentConfig, **extra) -> str:
    items = [f"command={command}", f"config_sha256={cfg.config_hash()}", f"seed={cfg.seed}"]
    items += [f"{k}={fmt(v)}" for k, v in extra.items()]
    return "# " + " ".join(items) + "\n"


def parse_header(line: str) -> dict:
    if not line.startswith("#"):
        raise ValueError("missing provenance header")
    return dict(item.split("=", 1) for item in line[1:].split())


def write_csv(path, header: str, columns, rows) -> None:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def write_policy_csv(path, policy: Policy, values: np.ndarray, cfg: ExperimentConfig, **extra) -> None:
    grid = policy.grid
    hdr = header_line("solve-policy", cfg, L=grid.quantizer.L, M=grid.M,
                      B_set=",".join(str(b) for b in grid.B_set), quantizer=grid.quantizer.kind.value,
                      lam=policy.lam, avg_rate=policy.avg_rate, avg_cost=policy.avg_cost,
                      saturated=policy.saturated, **extra)
    rows = [(m, n, grid.g_points[m], grid.d_points[n], policy.table[m, n], values[m, n])
            for m in range(grid.M) for n in range(grid.N)]
    write_csv(path, hdr, POLICY_COLUMNS, rows)


def read_policy_csv(path, grid: Optional[StateGrid] = None):
    """Reload a policy CSV; returns (Policy, values, header dict).

    Without ``grid`` the grid is rebuilt from the header (grids are
    deterministic) and checked against the stored bin centres.
    """
    text = Path(path).read_text()
    first, _, rest = text.partition("\n")
    meta = parse_header(first)
    rows = list(csv.DictReader(io.StringIO(rest)))
    if not rows or list(rows[0].keys()) != POLICY_COLUMNS:
        raise ValueError(f"{path}: expected columns {POLICY_COLUMNS}")
    if grid is None:
        B_set = [int(b) for b in meta["B_set"].split(",")]
        grid = build_grid(int(meta["L"]), B_set, int(meta["M"]), QuantizerModel(meta["quantizer"], int(meta["L"])))
    table = np.zeros((grid.M, grid.N), dtype=int)
    values = np.zeros((grid.M, grid.N))
    seen = np.zeros((grid.M, grid.N), dtype=bool)
    for r in rows:
        m, n = int(r["g_index"]), int(r["d_index"])
        if not (0 <= m < grid.M and 0 <= n < grid.N):
            raise ValueError(f"{path}: state ({m}, {n}) outside the grid")
        if float(r["g_point"]) != grid.g_points[m] or float(r["d_point"]) != grid.d_points[n]:
            raise ValueError(f"{path}: bin centres do not match the grid")
        table[m, n] = int(r["B"])
        values[m, n] = float(r["value"])
        seen[m, n] = True
    if not seen.all():
        raise ValueError(f"{path}: policy table is incomplete")
    pol = Policy(table=table, lam=float(meta.get("lam", "0")), avg_rate=float(meta.get("avg_rate", "nan")),
                 avg_cost=float(meta.get("avg_cost", "nan")), grid=grid,
                 saturated=meta.get("saturated", "false") == "true")
    return pol, values, meta


def read_table_csv(path):
    """(header dict, list of row dicts) for any CSV written by :func:`write_csv`."""
    text = Path(path).read_text()
    first, _, rest = text.partition("\n")
    return parse_header(first), list(csv.DictReader(io.StringIO(rest)))
