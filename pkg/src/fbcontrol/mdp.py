"""Discretized feedback-control MDP and its solvers.

The controller state of one feedback link is (g, delta): interference-channel
gain and CSIT error. Both are binned onto a grid; gain transitions and error
transitions are independent given the feedback decision, so the kernel of
the joint chain is the product of a g-kernel and a per-decision delta-kernel.

Arrays indexed by decision use the position of B in ``grid.B_set`` (sorted
ascending, ``B_set[0] == 0``).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .channel import FadingMode, FadingProcess, cn, csit_error
from .quantizer import QuantizerModel, at_distance, orthogonal_directions, random_directions

log = logging.getLogger(__name__)

SMOOTHING = 1e-6


class ReducibleChainError(RuntimeError):
    """Policy evaluation hit a singular system (closed-loop chain not unichain)."""


# --------------------------------------------------------------------------- grid


@dataclass(frozen=True)
class StateGrid:
    g_edges: np.ndarray   # M + 1 edges, g_edges[0] == 0, g_edges[-1] == inf
    g_points: np.ndarray  # M representative gains
    d_edges: np.ndarray   # N + 1 edges, d_edges[0] == 0, d_edges[-1] == 1
    d_points: np.ndarray  # N representative CSIT errors, ascending
    B_set: tuple          # feedback decisions, ascending, starts with 0
    quantizer: QuantizerModel = field(default_factory=QuantizerModel)

    @property
    def M(self) -> int:
        return len(self.g_points)

    @property
    def N(self) -> int:
        return len(self.d_points)

    @property
    def fb_error(self) -> np.ndarray:
        """Mean quantization error for each decision (entry 0 unused)."""
        return np.asarray(self.quantizer.mean_error(np.asarray(self.B_set, dtype=float)))

    def g_index(self, g):
        return np.clip(np.searchsorted(self.g_edges, g, side="right") - 1, 0, self.M - 1)

    def d_index(self, delta):
        return np.clip(np.searchsorted(self.d_edges, delta, side="right") - 1, 0, self.N - 1)


def _check_B_set(B_set: Sequence[int]) -> tuple:
    B = tuple(sorted(int(b) for b in B_set))
    if not B or B[0] != 0:
        raise ValueError("B_set must be nonempty and contain 0")
    if len(set(B)) != len(B) or B[0] < 0:
        raise ValueError("B_set entries must be distinct nonnegative integers")
    return B


def build_grid(L: int, B_set: Sequence[int], M: int, model: Optional[QuantizerModel] = None,
               g_distribution=None) -> StateGrid:
    """Equal-probability gain grid and an error grid at the mean quantization errors."""
    if M < 2:
        raise ValueError("M must be >= 2")
    B_set = _check_B_set(B_set)
    model = model or QuantizerModel(L=L)
    dist = g_distribution if g_distribution is not None else stats.gamma(L)
    q = np.arange(1, M) / M
    inner = dist.ppf(q)
    if not np.all(np.isfinite(inner)) or np.any(np.diff(inner) <= 0):
        raise RuntimeError("quantile inversion of the gain distribution failed")
    g_edges = np.concatenate([[0.0], inner, [np.inf]])
    if g_distribution is None:
        # E[g 1{a <= g < b}] = L (F_{L+1}(b) - F_{L+1}(a)) for Gamma(L, 1)
        upper = stats.gamma(L + 1).cdf(g_edges)
        g_points = L * np.diff(upper) * M
    else:
        g_points = np.array([dist.expect(lambda x: x, lb=a, ub=b, conditional=True)
                             for a, b in zip(g_edges[:-1], g_edges[1:])])
    d_points = np.sort(np.asarray(model.mean_error(np.asarray(B_set, dtype=float)), dtype=float))
    d_edges = np.concatenate([[0.0], 0.5 * (d_points[1:] + d_points[:-1]), [1.0]])
    return StateGrid(g_edges=g_edges, g_points=g_points, d_edges=d_edges,
                     d_points=d_points, B_set=B_set, quantizer=model)


# ------------------------------------------------------------------------- kernel


@dataclass(frozen=True)
class TransitionKernel:
    g_kernel: np.ndarray       # (M, M)
    d_kernel_nofb: np.ndarray  # (N, N)
    d_dist_fb: np.ndarray      # (|B_set|, N); row 0 (B = 0) is unused
    counts: Optional[dict] = None

    def d_matrix(self, b_idx: int) -> np.ndarray:
        if b_idx == 0:
            return self.d_kernel_nofb
        return np.broadcast_to(self.d_dist_fb[b_idx], self.d_kernel_nofb.shape)


def smooth_rows(P: np.ndarray, eps: float = SMOOTHING) -> np.ndarray:
    P = np.asarray(P, dtype=float) + eps
    return P / P.sum(axis=-1, keepdims=True)


def enforce_dominance(P: np.ndarray) -> np.ndarray:
    """Project a row-stochastic matrix onto rows that increase in first-order dominance.

    Tail sums S[i, k] = sum_{j >= k} P[i, j] are made nondecreasing in i by
    averaging the running max from above with the running min from below;
    both preserve monotonicity in k, so the result is again stochastic.
    """
    P = np.asarray(P, dtype=float)
    S = np.cumsum(P[:, ::-1], axis=1)[:, ::-1]
    up = np.maximum.accumulate(S, axis=0)
    down = np.minimum.accumulate(S[::-1], axis=0)[::-1]
    S = 0.5 * (up + down)
    out = S - np.concatenate([S[:, 1:], np.zeros((S.shape[0], 1))], axis=1)
    return np.clip(out, 0.0, None) / np.clip(out, 0.0, None).sum(axis=1, keepdims=True)


def fb_error_distribution(grid: StateGrid) -> np.ndarray:
    """Bin masses of the quantization-error law on the error grid, per decision."""
    rows = np.zeros((len(grid.B_set), grid.N))
    for i, B in enumerate(grid.B_set):
        if B == 0:
            continue
        cdf = np.asarray(grid.quantizer.cdf(grid.d_edges, B), dtype=float)
        cdf[0], cdf[-1] = 0.0, 1.0
        rows[i] = np.diff(cdf)
    return rows


def evolved_fb_distribution(grid: StateGrid, rho: float, samples: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Bin masses of the next-slot error after a feedback event, per decision.

    The channel moves one step after the quantized direction is delivered, so
    the next error is 1 - |s_{t+1}^H s_hat_t|^2 rather than the quantization
    error itself. All decisions share the same channel draws, uniforms and
    error directions (common random numbers), which keeps the rows ordered.
    """
    L = grid.quantizer.L
    rows = np.zeros((len(grid.B_set), grid.N))
    Bs = [b for b in grid.B_set if b > 0]
    if not Bs:
        return rows
    C = {b: np.zeros(grid.N) for b in Bs}
    for lo in range(0, samples, 1 << 16):
        n = min(1 << 16, samples - lo)
        h = cn(rng, (n, L))
        s = h / np.linalg.norm(h, axis=-1, keepdims=True)
        q = orthogonal_directions(s, rng)
        v = rng.random(n)
        h2 = rho * h + np.sqrt(1.0 - rho ** 2) * cn(rng, (n, L))
        s2 = h2 / np.linalg.norm(h2, axis=-1, keepdims=True)
        for b in Bs:
            eps = grid.quantizer.error_from_uniform(b, v)
            u = np.sqrt(1.0 - eps)[:, None] * s + np.sqrt(eps)[:, None] * q
            C[b] += np.bincount(grid.d_index(csit_error(s2, u)), minlength=grid.N)
    for i, b in enumerate(grid.B_set):
        if b > 0:
            rows[i] = C[b] / C[b].sum()
    # more bits must give stochastically smaller errors
    rows[1:] = enforce_dominance(rows[1:][::-1])[::-1]
    return rows


def _count(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(a * n + b, minlength=n * n).reshape(n, n).astype(float)


def _normalize_counts(C: np.ndarray, what: str, min_count: int = 100) -> np.ndarray:
    rows = C.sum(axis=1)
    thin = np.flatnonzero(rows < min_count)
    if thin.size:
        warnings.warn(f"{what}: rows {thin.tolist()} have fewer than {min_count} samples",
                      RuntimeWarning, stacklevel=3)
    P = np.where(rows[:, None] > 0, C / np.maximum(rows, 1)[:, None], 1.0 / C.shape[1])
    return P


def _refeed(grid: StateGrid, s: np.ndarray, u: np.ndarray, sel: np.ndarray,
            rng: np.random.Generator) -> np.ndarray:
    """Replace CSIT rows ``sel`` after a feedback event with B drawn uniformly
    from the decision set (B = 0 leaves an isotropic random direction)."""
    u = u.copy()
    n = int(sel.sum())
    if n == 0:
        return u
    B = rng.choice(np.asarray(grid.B_set), size=n)
    new = random_directions(rng, (n,), grid.quantizer.L)
    fb = B > 0
    if fb.any():
        new[fb] = at_distance(s[sel][fb], grid.quantizer.sample_error(B[fb], rng), rng)
    u[sel] = new
    return u


def estimate_kernel(grid: StateGrid, process: FadingProcess, samples: int = 10 ** 6,
                    rng: Optional[np.random.Generator] = None, *, smoothing: float = SMOOTHING,
                    dominance: bool = True, horizon: Optional[int] = None,
                    post_feedback: str = "evolved") -> TransitionKernel:
    """Estimate the product transition kernel by simulation.

    * gain kernel: ``samples`` independent stationary pairs (h_t, h_{t+1});
    * no-feedback error kernel: ``samples`` transitions from chains whose CSIT
      is set by occasional feedback events (decision drawn uniformly from
      B_set, B = 0 meaning a random direction) and otherwise left stale;
    * post-feedback law: with ``post_feedback="evolved"`` (default) the
      next-slot error after quantizing and one channel step, simulated with
      ``samples`` draws; with ``"quantizer"`` the exact bin masses of the
      quantization error itself (exact under a frozen channel).

    ``dominance`` projects the estimated rows onto stochastically ordered rows
    so Monte Carlo noise cannot break the monotone-dynamics assumption.
    """
    rng = rng if rng is not None else np.random.default_rng()
    L = grid.quantizer.L
    rho = 0.0 if process.mode is FadingMode.BLOCK_IID else process.rho_c
    innov = np.sqrt(1.0 - rho ** 2)

    # gain kernel
    Cg = np.zeros((grid.M, grid.M))
    for lo in range(0, samples, 1 << 17):
        n = min(1 << 17, samples - lo)
        h = cn(rng, (n, L))
        h2 = rho * h + innov * cn(rng, (n, L))
        Cg += _count(grid.g_index(np.sum(np.abs(h) ** 2, -1)),
                     grid.g_index(np.sum(np.abs(h2) ** 2, -1)), grid.M)

    # no-feedback error kernel
    if horizon is None:
        horizon = 2 if rho == 0.0 else int(np.clip(3.0 / max(1.0 - rho ** 2, 1e-12), 2, 4000))
    chains = max(1, int(np.ceil(samples / horizon)))
    # chains are re-fed back at random so low-error bins are visited often;
    # a restart only resets the CSIT, the recorded transition stays feedback-free
    restart = 0.0 if rho == 0.0 else min(1.0, 4.0 / horizon)
    h = cn(rng, (chains, L))
    s = h / np.linalg.norm(h, axis=-1, keepdims=True)
    u = _refeed(grid, s, random_directions(rng, (chains,), L), np.ones(chains, bool), rng)
    Cd = np.zeros((grid.N, grid.N))
    for step in range(horizon):
        if step and restart:
            u = _refeed(grid, s, u, rng.random(chains) < restart, rng)
        idx = grid.d_index(csit_error(s, u))
        h = rho * h + innov * cn(rng, h.shape)
        s = h / np.linalg.norm(h, axis=-1, keepdims=True)
        Cd += _count(idx, grid.d_index(csit_error(s, u)), grid.N)

    Pg = _normalize_counts(Cg, "gain kernel")
    Pd = _normalize_counts(Cd, "no-feedback error kernel")
    if dominance:
        Pg, Pd = enforce_dominance(Pg), enforce_dominance(Pd)
    if post_feedback == "evolved":
        fbd = evolved_fb_distribution(grid, rho, samples, rng)
    elif post_feedback == "quantizer":
        fbd = fb_error_distribution(grid)
    else:
        raise ValueError(f"unknown post_feedback mode {post_feedback!r}")
    return TransitionKernel(g_kernel=smooth_rows(Pg, smoothing),
                            d_kernel_nofb=smooth_rows(Pd, smoothing),
                            d_dist_fb=np.vstack([fbd[:1], smooth_rows(fbd[1:], smoothing)]),
                            counts={"g": Cg, "d": Cd})


# ------------------------------------------------------------------------ solvers


@dataclass
class Policy:
    table: np.ndarray            # (M, N) feedback decisions (bit counts)
    lam: float = 0.0
    avg_rate: float = float("nan")
    avg_cost: float = float("nan")
    grid: Optional[StateGrid] = field(default=None, repr=False, compare=False)
    saturated: bool = False
    iterations: int = 0

    @property
    def num_decisions(self) -> int:
        return int(np.unique(self.table).size)

    def bits(self, g, delta) -> np.ndarray:
        """Decisions for continuous states, by binning onto the policy's grid."""
        return self.table[self.grid.g_index(g), self.grid.d_index(delta)]


@dataclass
class ValueFunction:
    values: np.ndarray           # (M, N)
    kind: str                    # "differential" or "discounted"
    rho: Optional[float] = None
    avg_cost: float = float("nan")
    converged: bool = True
    iterations: int = 0
    history: list = field(default_factory=list)


def cost_table(grid: StateGrid, lam: float) -> np.ndarray:
    """Cost per stage for every decision and state, shape (|B_set|, M, N)."""
    B = np.asarray(grid.B_set, dtype=float)
    g = grid.g_points
    G = (g[None, :] * grid.fb_error[:, None] + lam * B[:, None])[:, :, None]
    G = np.broadcast_to(G, (len(B), grid.M, grid.N)).copy()
    G[0] = g[:, None] * grid.d_points[None, :]
    return G


def cost_per_stage(state, B: int, lam: float, grid: StateGrid) -> float:
    m, n = state
    if B == 0:
        return float(grid.g_points[m] * grid.d_points[n])
    return float(grid.g_points[m] * grid.quantizer.mean_error(B) + lam * B)


def expected_next(V: np.ndarray, kernel: TransitionKernel) -> np.ndarray:
    """E[V(x') | x, B] for every decision and state, shape (|B_set|, M, N)."""
    Pg = kernel.g_kernel
    A = kernel.d_dist_fb.shape[0]
    out = np.empty((A,) + V.shape)
    out[0] = Pg @ V @ kernel.d_kernel_nofb.T
    if A > 1:
        fb = Pg @ (V @ kernel.d_dist_fb[1:].T)   # (M, A-1)
        out[1:] = fb.T[:, :, None]
    return out


def argmin_smallest(Q: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Index of the minimum over axis 0; near-ties go to the smallest decision."""
    qmin = Q.min(axis=0)
    ok = Q <= qmin + rtol * (1.0 + np.abs(qmin))
    return np.argmax(ok, axis=0)


def q_values(V: np.ndarray, kernel: TransitionKernel, grid: StateGrid, lam: float,
             rho: float = 1.0) -> np.ndarray:
    return cost_table(grid, lam) + rho * expected_next(V, kernel)


def _policy(grid: StateGrid, idx: np.ndarray, lam: float, **kw) -> Policy:
    return Policy(table=np.asarray(grid.B_set)[idx], lam=lam, grid=grid, **kw)


def bellman_backup(V: ValueFunction, kernel: TransitionKernel, grid: StateGrid, lam: float,
                   rho: Optional[float] = None):
    """One application of the discounted DP operator; returns (new V, greedy policy)."""
    rho = V.rho if rho is None else rho
    if not 0.0 <= rho < 1.0:
        raise ValueError("discount factor must lie in [0, 1)")
    Q = q_values(V.values, kernel, grid, lam, rho)
    idx = argmin_smallest(Q)
    newV = np.take_along_axis(Q, idx[None], 0)[0]
    return ValueFunction(values=newV, kind="discounted", rho=rho), _policy(grid, idx, lam)


def value_iteration(kernel: TransitionKernel, grid: StateGrid, lam: float, rho: float,
                    tol: float = 1e-9, max_iter: int = 200_000, V0: Optional[np.ndarray] = None):
    """Iterate the DP operator until the sup-norm step is below ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    V = np.zeros((grid.M, grid.N)) if V0 is None else np.array(V0, dtype=float)
    G = cost_table(grid, lam)
    converged = False
    for it in range(1, max_iter + 1):
        Q = G + rho * expected_next(V, kernel)
        newV = Q.min(axis=0)
        resid = np.max(np.abs(newV - V))
        V = newV
        if resid < tol:
            converged = True
            break
    if not converged:
        log.warning("value iteration stopped after %d sweeps (residual %.3g)", max_iter, resid)
    Q = G + rho * expected_next(V, kernel)
    idx = argmin_smallest(Q)
    vf = ValueFunction(values=V, kind="discounted", rho=rho, converged=converged, iterations=it)
    pol = _policy(grid, idx, lam, iterations=it)
    pol.avg_rate = average_rate(pol, kernel)
    return vf, pol


def closed_loop_matrix(idx: np.ndarray, kernel: TransitionKernel) -> np.ndarray:
    """Transition matrix over flattened states s = m * N + n under decision indices ``idx``."""
    M, N = idx.shape
    D = np.stack([kernel.d_matrix(b) for b in range(kernel.d_dist_fb.shape[0])])
    n_of = np.tile(np.arange(N), M)
    drows = D[idx.ravel(), n_of]                       # (S, N)
    grows = np.repeat(kernel.g_kernel, N, axis=0)      # (S, M)
    return (grows[:, :, None] * drows[:, None, :]).reshape(M * N, M * N)


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    S = P.shape[0]
    A = (np.eye(S) - P).T
    A[-1] = 1.0
    rhs = np.zeros(S)
    rhs[-1] = 1.0
    pi = np.linalg.solve(A, rhs)
    return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()


def decision_indices(policy_table: np.ndarray, grid: StateGrid) -> np.ndarray:
    """Positions in ``grid.B_set`` of every entry of a decision table."""
    lookup = {b: i for i, b in enumerate(grid.B_set)}
    return np.vectorize(lookup.__getitem__)(np.asarray(policy_table))


def average_rate(policy: Policy, kernel: TransitionKernel) -> float:
    """Long-run mean feedback bits of the closed loop (exact stationary law)."""
    idx = decision_indices(policy.table, policy.grid)
    pi = stationary_distribution(closed_loop_matrix(idx, kernel))
    return float(pi @ policy.table.ravel())


def evaluate_policy(idx: np.ndarray, kernel: TransitionKernel, grid: StateGrid, lam: float):
    """Average cost and differential values of a stationary policy (U[0, 0] = 0)."""
    M, N = idx.shape
    S = M * N
    P = closed_loop_matrix(idx, kernel)
    c = np.take_along_axis(cost_table(grid, lam), idx[None], 0)[0].ravel()
    A = np.eye(S) - P
    A[:, 0] = 1.0      # unknown 0 is the average cost, since U[0] is pinned to 0
    try:
        x = np.linalg.solve(A, c)
    except np.linalg.LinAlgError as exc:
        raise ReducibleChainError("policy evaluation system is singular") from exc
    if not np.all(np.isfinite(x)):
        raise ReducibleChainError("policy evaluation produced non-finite values")
    avg = x[0]
    U = x.copy()
    U[0] = 0.0
    return avg, U.reshape(M, N), P, c


def policy_iteration(kernel: TransitionKernel, grid: StateGrid, lam: float, max_iter: int = 100,
                     init: Optional[np.ndarray] = None):
    """Average-cost policy iteration from the zero policy (or ``init`` decision indices)."""
    idx = np.zeros((grid.M, grid.N), dtype=int) if init is None else np.asarray(init).copy()
    G = cost_table(grid, lam)
    history = []
    for it in range(1, max_iter + 1):
        avg, U, P, _ = evaluate_policy(idx, kernel, grid, lam)
        history.append(avg)
        Q = G + expected_next(U, kernel)
        new = argmin_smallest(Q)
        # keep the current action on near-ties; switching between equally good
        # actions can make policy iteration cycle
        qmin = Q.min(axis=0)
        cur = np.take_along_axis(Q, idx[None], 0)[0]
        new = np.where(cur <= qmin + 1e-12 * (1.0 + np.abs(qmin)), idx, new)
        if np.array_equal(new, idx):
            break
        idx = new
    else:
        log.warning("policy iteration did not settle within %d rounds", max_iter)
    pi = stationary_distribution(P)
    pol = _policy(grid, idx, lam, avg_cost=avg, iterations=it)
    pol.avg_rate = float(pi @ pol.table.ravel())
    vf = ValueFunction(values=U, kind="differential", avg_cost=avg, iterations=it, history=history)
    return pol, vf


def solve_budgeted(kernel: TransitionKernel, grid: StateGrid, b_bar_per_link: float,
                   rate_tol: float = 0.05, lam_tol: float = 1e-6, max_probes: int = 200) -> Policy:
    """Bisection on the multiplier so the closed-loop mean rate meets the per-link budget.

    Returns the cheapest-rate-gap policy whose rate does not exceed the budget.
    ``saturated`` is set when the budget is slack even without a price on bits.
    """
    if b_bar_per_link < 0:
        raise ValueError("budget must be nonnegative")
    target = float(b_bar_per_link)
    probes = 0

    def solve(lam):
        nonlocal probes
        probes += 1
        pol, _ = policy_iteration(kernel, grid, lam)
        return pol

    best = solve(0.0)
    if best.avg_rate <= target + 1e-12:
        best.saturated = True
        return best
    lo, hi = 0.0, float(np.max(grid.g_points) * np.max(grid.d_points))
    hi_pol = solve(hi)
    while hi_pol.avg_rate > target + 1e-12:
        lo, hi = hi, 2.0 * hi
        hi_pol = solve(hi)
        if probes > max_probes:
            raise RuntimeError("could not bracket the multiplier")
    while (target - hi_pol.avg_rate) > rate_tol and (hi - lo) > lam_tol and probes < max_probes:
        mid = 0.5 * (lo + hi)
        pol = solve(mid)
        if pol.avg_rate <= target + 1e-12:
            hi, hi_pol = mid, pol
        else:
            lo = mid
    return hi_pol


def toy_problem(seed: int = 0, M: int = 3, N: int = 3, B_set=(0, 1, 2), L: int = 2):
    """Small random problem with strictly positive kernels, for oracle checks."""
    rng = np.random.default_rng(seed)
    model = QuantizerModel(L=L)
    B_set = _check_B_set(B_set)
    g_points = np.sort(rng.uniform(0.2, 3.0, M))
    g_edges = np.concatenate([[0.0], 0.5 * (g_points[1:] + g_points[:-1]), [np.inf]])
    d_points = np.sort(rng.uniform(0.05, 0.95, N))
    d_edges = np.concatenate([[0.0], 0.5 * (d_points[1:] + d_points[:-1]), [1.0]])
    grid = StateGrid(g_edges, g_points, d_edges, d_points, B_set, model)
    fb = np.zeros((len(B_set), N))
    fb[1:] = rng.dirichlet(np.ones(N), size=len(B_set) - 1)
    kernel = TransitionKernel(g_kernel=rng.dirichlet(np.ones(M), size=M),
                              d_kernel_nofb=rng.dirichlet(np.ones(N), size=N),
                              d_dist_fb=fb)
    return grid, kernel


__all__ = [
    "StateGrid", "TransitionKernel", "Policy", "ValueFunction", "ReducibleChainError",
    "build_grid", "estimate_kernel", "cost_per_stage", "cost_table", "bellman_backup",
    "value_iteration", "policy_iteration", "solve_budgeted", "average_rate",
    "stationary_distribution", "closed_loop_matrix", "evaluate_policy", "q_values",
    "expected_next", "decision_indices", "evolved_fb_distribution", "enforce_dominance",
    "smooth_rows", "fb_error_distribution", "toy_problem",
]
