"""Numerical checks of the structural properties of optimal feedback policies.

Three properties are checked on a policy table (rows: gain, columns: CSIT
error, both ascending):

* P1: in every row the no-feedback states form a down-set in the error;
* P2: in every row the positive decision is one constant value;
* P3: in every column, among states that feed back, bits never decrease with gain.

The value-function checks (mixed difference ``f`` and the Q-function ``Z``)
come with them.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mdp import Policy, StateGrid, TransitionKernel, ValueFunction, argmin_smallest, q_values

SLACK = 1e-8


@dataclass
class StructureReport:
    thm1_p1_ok: bool = True
    thm1_p2_ok: bool = True
    thm1_p3_ok: bool = True
    violations: list = field(default_factory=list)
    f_min: Optional[float] = None
    z_convexity_min: Optional[float] = None
    z_delta_spread: Optional[float] = None
    boundary_slope: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.thm1_p1_ok and self.thm1_p2_ok and self.thm1_p3_ok

    def to_text(self) -> str:
        lines = [
            f"P1 (no-feedback states form a down-set in delta): {'ok' if self.thm1_p1_ok else 'VIOLATED'}",
            f"P2 (positive decision constant in delta):          {'ok' if self.thm1_p2_ok else 'VIOLATED'}",
            f"P3 (bits nondecreasing in g):                      {'ok' if self.thm1_p3_ok else 'VIOLATED'}",
        ]
        if self.f_min is not None:
            lines.append(f"min mixed difference f: {self.f_min:.6g}")
        if self.z_convexity_min is not None:
            lines.append(f"min second difference of Z over B > 0: {self.z_convexity_min:.6g}")
        if self.z_delta_spread is not None:
            lines.append(f"max spread of Z across delta for B > 0: {self.z_delta_spread:.3g}")
        if self.boundary_slope is not None:
            lines.append(f"feedback-boundary slope (delta index per g index, not asserted): {self.boundary_slope:.4g}")
        lines.append(f"violations: {len(self.violations)}")
        for (m, n), detail in self.violations:
            lines.append(f"  (g_index={m}, d_index={n}): {detail}")
        return "\n".join(lines) + "\n"

    def violations_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["property", "g_index", "d_index", "detail"])
        for (m, n), detail in self.violations:
            w.writerow([detail.split(":")[0], m, n, detail])
        return buf.getvalue()


def verify_theorem1(policy, grid: Optional[StateGrid] = None) -> StructureReport:
    """Check P1-P3 on a decision table; violations are reported, never raised."""
    table = np.asarray(policy.table if isinstance(policy, Policy) else policy)
    M, N = table.shape
    rep = StructureReport()
    for m in range(M):
        row = table[m]
        pos = np.flatnonzero(row > 0)
        if pos.size == 0:
            continue
        first = pos[0]
        for n in range(first + 1, N):
            if row[n] == 0:
                rep.thm1_p1_ok = False
                rep.violations.append(((m, n), f"P1: no feedback above feedback state (g_index={m}, d_index={first})"))
        for n in pos[1:]:
            if row[n] != row[first]:
                rep.thm1_p2_ok = False
                rep.violations.append(((m, int(n)), f"P2: decision {row[n]} differs from {row[first]} at d_index={first}"))
    for n in range(N):
        col = table[:, n]
        rows = np.flatnonzero(col > 0)
        for a, c in zip(rows[:-1], rows[1:]):
            if col[c] < col[a]:
                rep.thm1_p3_ok = False
                rep.violations.append(((int(c), n), f"P3: {col[c]} bits below {col[a]} at lower g_index={a}"))
    rep.boundary_slope = _boundary_slope(table)
    return rep


def _boundary_slope(table: np.ndarray) -> Optional[float]:
    """Least-squares slope of the first feedback column against the gain index."""
    firsts = [(m, np.flatnonzero(r > 0)[0]) for m, r in enumerate(table) if np.any(r > 0)]
    if len(firsts) < 2:
        return None
    m, n = np.array(firsts, dtype=float).T
    if np.ptp(m) == 0:
        return None
    return float(np.polyfit(m, n, 1)[0])


def compute_f(V) -> np.ndarray:
    """Mixed second difference of V with V = 0 at index 0 of either axis."""
    v = np.asarray(V.values if isinstance(V, ValueFunction) else V, dtype=float)
    p = np.pad(v, ((1, 0), (1, 0)))
    return p[1:, 1:] - p[1:, :-1] - p[:-1, 1:] + p[:-1, :-1]


def compute_z(V, kernel: TransitionKernel, grid: StateGrid, lam: float, rho: Optional[float] = None) -> np.ndarray:
    """Q-values Z(x, B) for every decision and state, shape (|B_set|, M, N)."""
    if isinstance(V, ValueFunction):
        rho = V.rho if rho is None else rho
        V = V.values
    if rho is None:
        raise ValueError("discount factor required")
    return q_values(np.asarray(V, dtype=float), kernel, grid, lam, rho)


def z_second_differences(Z: np.ndarray, B_set) -> np.ndarray:
    """Second differences of Z in B over the positive decisions (slope-based for uneven spacing)."""
    B = np.asarray(B_set, dtype=float)[1:]
    Zp = Z[1:]
    if len(B) < 3:
        return np.zeros((0,) + Z.shape[1:])
    slope = np.diff(Zp, axis=0) / np.diff(B)[:, None, None]
    return np.diff(slope, axis=0)


def check_value_structure(V: ValueFunction, kernel: TransitionKernel, grid: StateGrid, lam: float,
                          report: Optional[StructureReport] = None) -> StructureReport:
    """Fill the value-function statistics into ``report`` (a new one if omitted)."""
    rep = report or StructureReport()
    f = compute_f(V)
    Z = compute_z(V, kernel, grid, lam)
    rep.f_min = float(f.min())
    d2 = z_second_differences(Z, grid.B_set)
    rep.z_convexity_min = float(d2.min()) if d2.size else 0.0
    rep.z_delta_spread = float(np.max(np.ptp(Z[1:], axis=2))) if len(grid.B_set) > 1 else 0.0
    return rep


def greedy_from_z(Z: np.ndarray, grid: StateGrid) -> np.ndarray:
    return np.asarray(grid.B_set)[argmin_smallest(Z)]


def seeded_violation(table: np.ndarray, rng: np.random.Generator) -> tuple:
    """Corrupt a table so that P1 or P2 must fail; returns (table, corrupted row).

    Used for negative-control fuzzing. Needs at least two error bins.
    """
    t = np.array(table, copy=True)
    M, N = t.shape
    m = int(rng.integers(M))
    pos = np.flatnonzero(t[m] > 0)
    if pos.size >= 2:
        n = int(rng.choice(pos[1:]))
        t[m, n] = 0 if rng.random() < 0.5 else t[m, n] + 1
    elif pos.size == 1 and pos[0] > 0:
        n = int(pos[0])
        t[m, n - 1], t[m, n] = t[m, n], 0
    else:
        t[m, 0], t[m, 1:] = 1, 0
    return t, m
