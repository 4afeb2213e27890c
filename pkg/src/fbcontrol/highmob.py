"""Feedback control under independent block fading (high mobility).

Per link and slot the interference-channel gain ``g`` and the stale CSIT error
``delta`` are independent; with unit-variance Rayleigh fading g ~ Gamma(L, 1)
and delta ~ Beta(L - 1, 1). Bits are continuous here (B >= 0 relaxation). The
per-link interference objective is

    I = E[g * min(c(B), delta)] / (L - 1),   c(B) = (L - 1)/L * 2^(-B/(L - 1)),

with the average-rate constraint E[B] <= r. Its optimum is water-filling:
B = Upsilon - (L - 1) log2(1/g) whenever delta >= Psi(g), else 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, optimize, stats
from scipy.special import gammainc, gammaln

LN2 = np.log(2.0)


class InfeasibleBudgetError(ValueError):
    """No threshold function satisfies the usefulness constraint."""


class NonconvexCurveError(ValueError):
    """A supplied rate-interference curve is not convex and nonincreasing."""


def _c(B, L):
    return (L - 1) / L * 2.0 ** (-np.asarray(B, dtype=float) / (L - 1))


def gain_distribution(L: int):
    return stats.gamma(L)


def error_distribution(L: int):
    return stats.beta(L - 1, 1)


# ----------------------------------------------------------------- gain cells


@dataclass(frozen=True)
class GainCells:
    """Partition of the gain axis with the per-cell moments the objective needs.

    ``p``: Pr(g in cell), ``m``: E[g; cell], ``ell``: E[log2(1/g); cell].
    """

    edges: np.ndarray
    p: np.ndarray
    m: np.ndarray
    ell: np.ndarray

    @property
    def size(self) -> int:
        return len(self.p)

    def index(self, g):
        return np.clip(np.searchsorted(self.edges, g, side="right") - 1, 0, self.size - 1)


def make_gain_cells(L: int, resolution: int = 64, g_distribution=None,
                    lo_q: float = 1e-5, hi_q: float = 1 - 1e-7) -> GainCells:
    """``resolution`` cells: [0, e1), log-spaced interior cells, [e_last, inf)."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    dist = g_distribution if g_distribution is not None else gain_distribution(L)
    inner = np.geomspace(dist.ppf(lo_q), dist.ppf(hi_q), resolution - 1)
    edges = np.concatenate([[0.0], inner, [np.inf]])
    p = np.diff(dist.cdf(edges))
    m = np.empty(resolution)
    ell = np.empty(resolution)
    for j, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        m[j] = integrate.quad(lambda x: x * dist.pdf(x), a, b)[0]
        ell[j] = integrate.quad(lambda x: -np.log2(x) * dist.pdf(x), a, b, limit=200)[0]
    return GainCells(edges=edges, p=p, m=m, ell=ell)


# ------------------------------------------------------------ error law helpers


class _ErrorLaw:
    """cdf(psi) and partial mean E[delta; delta < psi] of the CSIT error."""

    def __init__(self, L: int, delta_distribution=None):
        self.L = L
        self.dist = delta_distribution
        if delta_distribution is not None:
            t = np.linspace(0.0, 1.0, 4097)
            pdf = delta_distribution.pdf(t[1:-1])
            self._t = t
            self._cdf = delta_distribution.cdf(t)
            pm = np.concatenate([[0.0], integrate.cumulative_trapezoid(t[1:-1] * pdf, t[1:-1], initial=0.0)])
            self._pm = np.concatenate([pm, [delta_distribution.mean()]])

    def cdf(self, psi):
        if self.dist is None:
            return np.asarray(psi, dtype=float) ** (self.L - 1)
        return np.interp(psi, self._t, self._cdf)

    def partial_mean(self, psi):
        if self.dist is None:
            return (self.L - 1) / self.L * np.asarray(psi, dtype=float) ** self.L
        return np.interp(psi, self._t, self._pm)

    def sample(self, rng, size):
        if self.dist is None:
            return rng.beta(self.L - 1, 1, size)
        return self.dist.rvs(size=size, random_state=rng)


# ----------------------------------------------------------- water-filling policy


@dataclass
class WaterfillPolicy:
    """Water level plus a nonincreasing step threshold on gain cells."""

    upsilon: float
    psi: np.ndarray
    cells: GainCells = field(repr=False)
    b_bar_per_link: float
    L: int
    objective: float = float("nan")

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=float)
        if np.any(np.diff(self.psi) > 1e-12):
            raise ValueError("psi must be nonincreasing in g")

    def psi_at(self, g):
        return self.psi[self.cells.index(g)]

    def bits(self, g, delta):
        return waterfill_bits(g, delta, self, self.L)


def waterfill_bits(g, delta, policy: WaterfillPolicy, L: int):
    """Continuous bits Upsilon - (L-1) log2(1/g) where delta >= Psi(g), else 0."""
    g = np.asarray(g, dtype=float)
    if np.any(g <= 0):
        raise ValueError("gain must be positive")
    if L != policy.L:
        raise ValueError("policy was built for a different antenna count")
    B = policy.upsilon - (L - 1) * np.log2(1.0 / g)
    on = (np.asarray(delta) >= policy.psi_at(g)) & (B > 0)
    out = np.where(on, B, 0.0)
    return out[()] if out.ndim == 0 else out


def water_level(psi, cells: GainCells, r: float, L: int, law: Optional[_ErrorLaw] = None) -> float:
    """Upsilon meeting E[B] = r over the feedback region defined by ``psi``."""
    law = law or _ErrorLaw(L)
    a = 1.0 - law.cdf(psi)
    pr = float(np.dot(cells.p, a))
    if pr <= 0:
        return np.inf
    return (r + (L - 1) * float(np.dot(cells.ell, a))) / pr


def _batch_objective(P: np.ndarray, cells: GainCells, r: float, L: int, law: "_ErrorLaw"):
    """Objective and water level for every row of the threshold matrix ``P``."""
    a = 1.0 - law.cdf(P)
    pr = a @ cells.p
    no_fb = law.partial_mean(P) @ cells.m
    active = P < 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ups = (r + (L - 1) * (a @ cells.ell)) / pr
        lo = np.where(active, cells.edges[:-1], np.inf)
        # bits are smallest at the lowest active edge; usefulness c(B(e)) <= Psi
        # on a cell is tightest at its lower edge e, i.e. c(Upsilon) <= Psi * e
        e0 = lo.min(axis=1)
        ok = (e0 > 0) & (ups - (L - 1) * np.log2(1.0 / e0) >= -1e-12)
        slack = np.where(active, P * cells.edges[:-1], np.inf).min(axis=1)
        c_ups = _c(ups, L)
        ok &= c_ups <= slack * (1 + 1e-12)
        val = (c_ups * pr + no_fb) / (L - 1)
    # never feeding back spends nothing, which is within any budget
    none = pr <= 1e-15
    val = np.where(none, no_fb / (L - 1), np.where(ok, val, np.inf))
    return val, np.where(none, np.inf, ups)


def feasible(psi, upsilon: float, cells: GainCells, L: int) -> bool:
    """Bits nonnegative and feedback useful (c(B) <= Psi) at every active cell's lower edge."""
    active = np.asarray(psi) < 1.0
    if not active.any():
        return True
    lo = cells.edges[:-1][active]
    if lo[0] <= 0:
        return False
    B = upsilon - (L - 1) * np.log2(1.0 / lo)
    return bool(np.all(B >= -1e-12) and np.all(_c(B, L) <= np.asarray(psi)[active] * (1 + 1e-12)))


def threshold_objective(psi, cells: GainCells, r: float, L: int, law: Optional[_ErrorLaw] = None):
    """(interference, Upsilon) for a step threshold; interference is inf when infeasible."""
    law = law or _ErrorLaw(L)
    val, ups = _batch_objective(np.asarray(psi, dtype=float)[None, :], cells, r, L, law)
    return float(val[0]), float(ups[0])


def repair_threshold(psi, cells: GainCells, r: float, L: int, law: Optional[_ErrorLaw] = None,
                     max_rounds: int = 1000) -> np.ndarray:
    """Make a nonincreasing threshold feasible.

    Low cells whose bits would be negative are switched off and thresholds are
    raised where feedback would not beat the stale CSIT.
    """
    law = law or _ErrorLaw(L)
    psi = np.minimum.accumulate(np.clip(np.asarray(psi, dtype=float), 0.0, 1.0))
    lower = cells.edges[:-1]
    for _ in range(max_rounds):
        val, ups = threshold_objective(psi, cells, r, L, law)
        if np.isfinite(val):
            return psi
        active = np.flatnonzero(psi < 1.0)
        if active.size == 0:
            break
        e0 = lower[active[0]]
        if e0 <= 0 or ups - (L - 1) * np.log2(1.0 / e0) < 0:
            psi[active[0]] = 1.0
            continue
        with np.errstate(divide="ignore"):
            need = np.where(psi < 1.0, _c(ups, L) / lower, 0.0)
        psi = np.minimum(1.0, np.maximum(psi, need * (1 + 1e-9)))
        psi = np.maximum.accumulate(psi[::-1])[::-1]
    raise InfeasibleBudgetError("could not repair threshold")


def _coordinate_descent(psi, cells, r, L, law, sweeps=200, points=17, zooms=3, tol=1e-9):
    n = len(psi)
    best, _ = threshold_objective(psi, cells, r, L, law)
    for _ in range(sweeps):
        start = best
        for j in range(n):
            hi = psi[j - 1] if j > 0 else 1.0
            lo = psi[j + 1] if j + 1 < n else 0.0
            c_lo, c_hi = lo, hi
            for _ in range(zooms):
                cand = np.linspace(c_lo, c_hi, points)
                P = np.repeat(psi[None, :], points, axis=0)
                P[:, j] = cand
                vals, _ = _batch_objective(P, cells, r, L, law)
                k = int(np.argmin(vals))
                if vals[k] < best:
                    best, psi[j] = vals[k], cand[k]
                step = (c_hi - c_lo) / (points - 1)
                c_lo, c_hi = max(lo, psi[j] - step), min(hi, psi[j] + step)
        if start - best <= tol * max(1.0, abs(best)):
            break
    return psi, best


def search_threshold(L: int, K: int, b_bar: float, g_distribution=None, delta_distribution=None,
                     grid_resolution: int = 64, restarts: int = 8,
                     rng: Optional[np.random.Generator] = None,
                     cells: Optional[GainCells] = None) -> WaterfillPolicy:
    """Numerically optimize the step threshold by coordinate descent with restarts.

    One start is the projection of the exact Lagrangian threshold onto the
    cells (when the default laws are used); the rest are random nonincreasing
    step functions.
    """
    if b_bar <= 0:
        raise ValueError("b_bar must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    cells = cells or make_gain_cells(L, grid_resolution, g_distribution)
    law = _ErrorLaw(L, delta_distribution)
    r = b_bar / (K - 1)
    starts = []
    if g_distribution is None and delta_distribution is None:
        lag = lagrangian_solution(L, r)
        starts.append(np.minimum.accumulate(lag.psi(cells.m / cells.p)))
    while len(starts) < restarts:
        start = np.sort(rng.random(cells.size))[::-1]
        start[: rng.integers(1, cells.size // 2)] = 1.0
        starts.append(repair_threshold(start, cells, r, L, law))
    best_psi, best_val = None, np.inf
    for s in starts:
        psi, val = _coordinate_descent(np.array(s), cells, r, L, law)
        if val < best_val:
            best_psi, best_val = psi, val
    if best_psi is None or not np.isfinite(best_val):
        raise InfeasibleBudgetError(f"no feasible threshold for b_bar={b_bar}")
    ups = water_level(best_psi, cells, r, L, law)
    return WaterfillPolicy(upsilon=ups, psi=best_psi, cells=cells, b_bar_per_link=r, L=L,
                           objective=best_val)


# ------------------------------------------------------------ exact optimum


@dataclass(frozen=True)
class LagrangianSolution:
    """Exact optimum of the relaxed problem for Gamma gains and Beta errors.

    For multiplier ``mu`` the per-state optimal bits are
    B(g) = Upsilon - (L - 1) log2(1/g) with Upsilon = (L - 1) log2(ln2 / (mu L)),
    and feedback happens iff B(g) > 0 and g delta > mu ((L - 1)/ln2 + B(g)).
    """

    L: int
    mu: float
    rate: float
    interference: float

    @property
    def upsilon(self) -> float:
        if not np.isfinite(self.mu):
            return -np.inf      # zero rate: never feed back
        return (self.L - 1) * np.log2(LN2 / (self.mu * self.L)) if self.mu > 0 else np.inf

    def bits_if_fed(self, g):
        with np.errstate(divide="ignore"):
            return self.upsilon - (self.L - 1) * np.log2(1.0 / np.asarray(g, dtype=float))

    def psi(self, g):
        g = np.asarray(g, dtype=float)
        B = self.bits_if_fed(g)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self.mu * ((self.L - 1) / LN2 + B) / g
        return np.where(B > 0, np.minimum(t, 1.0), 1.0)

    def bits(self, g, delta):
        B = self.bits_if_fed(g)
        return np.where((np.asarray(delta) >= self.psi(g)) & (B > 0), B, 0.0)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def _lagrangian_moments(L: int, mu: float, panels: int = 48, span: float = 90.0):
    """(rate, interference) at multiplier ``mu``.

    Above g_c = mu L / ln2 the threshold mu((L-1)/ln2 + B(g))/g starts at
    (L-1)/L and decreases (its derivative is -mu B/g^2), so the integrands are
    smooth there and a composite Gauss-Legendre rule is accurate.
    """
    g_c = mu * L / LN2
    if g_c > span:
        return 0.0, 1.0
    ups = (L - 1) * np.log2(LN2 / (mu * L))
    # geometric panels resolve the log behaviour of B near g_c
    edges = g_c + np.concatenate([[0.0], np.geomspace(1e-9, span, panels)])
    lo, hi = edges[:-1, None], edges[1:, None]
    g = (0.5 * (hi - lo) * _GL_X + 0.5 * (hi + lo)).ravel()
    w = (0.5 * (hi - lo) * _GL_W).ravel()
    pdf = np.exp((L - 1) * np.log(g) - g - gammaln(L))
    B = ups - (L - 1) * np.log2(1.0 / g)
    psi = mu * ((L - 1) / LN2 + B) / g
    a = 1.0 - psi ** (L - 1)
    rate = float(np.sum(w * pdf * a * B))
    cost = float(np.sum(w * pdf * (a * mu * (L - 1) / LN2 + g * (L - 1) / L * psi ** L)))
    # below g_c nobody feeds back: E[g delta; g < g_c] = (L-1) Pr_{Gamma(L+1)}(g < g_c)
    cost += (L - 1) * gammainc(L + 1, g_c)
    return rate, cost / (L - 1)


def lagrangian_solution(L: int, rate_per_link: float, tol: float = 1e-12) -> LagrangianSolution:
    """Exact relaxed optimum at average rate ``rate_per_link`` (bisection on log mu)."""
    if rate_per_link <= 0:
        return LagrangianSolution(L=L, mu=np.inf, rate=0.0, interference=1.0)
    lo, hi = -60.0, 10.0    # natural log of mu; rate decreases in mu
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rate, _ = _lagrangian_moments(L, np.exp(mid))
        if rate > rate_per_link:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    mu = np.exp(0.5 * (lo + hi))
    rate, cost = _lagrangian_moments(L, mu)
    return LagrangianSolution(L=L, mu=mu, rate=rate, interference=cost)


def min_interference_curve(L: int, K: int, b_bars: Sequence[float]) -> np.ndarray:
    """Exact minimum per-link interference as a function of the per-user budget."""
    return np.array([lagrangian_solution(L, b / (K - 1)).interference for b in b_bars])


# ------------------------------------------------------------ Monte Carlo


def interference_samples(policy, L: int, g: np.ndarray, delta: np.ndarray, floor_bits: bool = False):
    """Per-sample interference contributions g * min(c(B), delta) / (L - 1)."""
    B = np.asarray(policy.bits(g, delta), dtype=float)
    if floor_bits:
        B = np.floor(B)
    err = np.where(B > 0, np.minimum(_c(B, L), delta), delta)
    return g * err / (L - 1), B


@dataclass(frozen=True)
class InterferenceEstimate:
    monte_carlo: float
    std_error: float
    analytic: float
    mean_bits: float


def min_interference(policy: WaterfillPolicy, L: int, samples: int = 10 ** 6,
                     rng: Optional[np.random.Generator] = None, floor_bits: bool = False,
                     delta_distribution=None) -> InterferenceEstimate:
    """Monte Carlo estimate of the interference achieved by ``policy``, with the
    analytic value of the same expression for comparison."""
    rng = rng if rng is not None else np.random.default_rng()
    law = _ErrorLaw(L, delta_distribution)
    g = rng.gamma(L, 1.0, samples)
    d = law.sample(rng, samples)
    vals, B = interference_samples(policy, L, g, d, floor_bits)
    analytic, _ = threshold_objective(policy.psi, policy.cells, policy.b_bar_per_link, L, law)
    return InterferenceEstimate(monte_carlo=float(vals.mean()),
                                std_error=float(vals.std(ddof=1) / np.sqrt(samples)),
                                analytic=float(analytic), mean_bits=float(B.mean()))


def rounding_inflation_bound(L: int, K: int) -> float:
    """Upper bound on the interference inflation caused by flooring the bits."""
    return 2.0 ** (1.0 / ((K - 1) * (L - 1)))


# ------------------------------------------------------------ rate allocation


@dataclass
class RateAllocation:
    rates: np.ndarray
    eta: float
    distances: np.ndarray
    alpha: float
    unclamped: Optional[np.ndarray] = None

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float)
        self.distances = np.asarray(self.distances, dtype=float)


def _check_distances(distances) -> np.ndarray:
    d = np.asarray(distances, dtype=float)
    if d.ndim != 1 or d.size == 0 or np.any(d <= 0):
        raise ValueError("distances must be a nonempty list of positive reals")
    return d


def allocate_rates_closed_form(distances, alpha: float, L: int, b_bar: float) -> RateAllocation:
    """Water-filling split of ``b_bar`` over links at the given distances.

    Rates are eta - alpha (L - 1) log2 d; links driven negative are switched
    off and eta is recomputed over the remaining ones.
    """
    d = _check_distances(distances)
    if b_bar < 0:
        raise ValueError("b_bar must be nonnegative")
    w = alpha * (L - 1) * np.log2(d)
    active = np.ones(d.size, bool)
    eta = (b_bar + w.sum()) / d.size
    unclamped = eta - w
    while True:
        eta = (b_bar + w[active].sum()) / active.sum()
        rates = np.where(active, eta - w, 0.0)
        neg = active & (rates < 0)
        if not neg.any():
            break
        active &= ~neg
    return RateAllocation(rates=rates, eta=float(eta), distances=d, alpha=alpha, unclamped=unclamped)


def check_convex_nonincreasing(curve: Callable, b_max: float, points: int = 65, tol: float = 1e-9) -> None:
    """Raise NonconvexCurveError if ``curve`` sampled on [0, b_max] is not convex nonincreasing."""
    b = np.linspace(0.0, b_max, points)
    v = np.array([float(curve(x)) for x in b])
    scale = max(1.0, float(np.max(np.abs(v))))
    if np.any(np.diff(v) > tol * scale):
        raise NonconvexCurveError("interference curve increases with the rate")
    if np.any(np.diff(v, 2) < -tol * scale):
        raise NonconvexCurveError("interference curve is not convex in the rate")


def allocate_rates_general(distances, alpha: float, L: int, b_bar: float, per_link_I_min,
                           check: bool = True, tol: float = 1e-10) -> RateAllocation:
    """Split ``b_bar`` to minimize sum_n d_n^(-alpha) I_n(b_n) for convex I_n.

    ``per_link_I_min`` is one callable shared by all links or a sequence of
    callables. Solved on the dual: for a price ``nu`` each link minimizes
    w_n I_n(b) + nu b on [0, b_bar] (bounded Brent), and ``nu`` is bisected
    until the rates sum to the budget.
    """
    d = _check_distances(distances)
    curves = list(per_link_I_min) if isinstance(per_link_I_min, (list, tuple)) else [per_link_I_min] * d.size
    if len(curves) != d.size:
        raise ValueError("need one curve per link")
    if check:
        for c in curves:
            check_convex_nonincreasing(c, b_bar)
    wts = d ** (-float(alpha))

    def rates_at(nu):
        out = np.empty(d.size)
        for n, (c, w) in enumerate(zip(curves, wts)):
            res = optimize.minimize_scalar(lambda b: w * c(b) + nu * b, bounds=(0.0, b_bar),
                                           method="bounded", options={"xatol": 1e-11})
            cand = [0.0, res.x, b_bar]
            out[n] = min(cand, key=lambda b: w * c(b) + nu * b)
        return out

    if b_bar == 0:
        return RateAllocation(rates=np.zeros(d.size), eta=0.0, distances=d, alpha=alpha)
    lo, hi = 0.0, 1.0
    while rates_at(hi).sum() > b_bar:
        hi *= 2.0
    if rates_at(lo).sum() <= b_bar:
        rates = rates_at(lo)
        return RateAllocation(rates=rates, eta=0.0, distances=d, alpha=alpha)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rates_at(mid).sum() > b_bar:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    r_lo, r_hi = rates_at(lo), rates_at(hi)
    # interpolate between the bracketing solutions so the budget binds exactly
    s_lo, s_hi = r_lo.sum(), r_hi.sum()
    t = 0.0 if s_lo == s_hi else (s_lo - b_bar) / (s_lo - s_hi)
    rates = (1 - t) * r_lo + t * r_hi
    return RateAllocation(rates=rates, eta=float(0.5 * (lo + hi)), distances=d, alpha=alpha)


def exponential_curve(L: int, scale: float = 1.0) -> Callable:
    """The large-rate interference law scale * 2^(-b/(L-1))."""
    return lambda b: scale * 2.0 ** (-b / (L - 1))


# ------------------------------------------------------------ two-tier bits


def two_tier_bits(g, distance, alpha: float, L: int, eta_prime: float):
    """eta' - alpha (L-1) log2 d - (L-1) log2(1/g), floored at 0."""
    g = np.asarray(g, dtype=float)
    distance = np.asarray(distance, dtype=float)
    if np.any(g <= 0) or np.any(distance <= 0):
        raise ValueError("gain and distance must be positive")
    out = np.maximum(0.0, eta_prime - alpha * (L - 1) * np.log2(distance) - (L - 1) * np.log2(1.0 / g))
    return out[()] if out.ndim == 0 else out


def _expected_two_tier(c: float, L: int) -> float:
    """E[max(0, c + (L-1) log2 g)] for g ~ Gamma(L)."""
    dist = gain_distribution(L)
    g0 = 2.0 ** (-c / (L - 1))
    return integrate.quad(lambda g: dist.pdf(g) * (c + (L - 1) * np.log2(g)), g0, np.inf,
                          limit=200, epsabs=1e-12)[0]


def calibrate_two_tier(distances, alpha: float, L: int, b_bar: float, tol: float = 1e-10) -> float:
    """eta' such that the expected bits summed over links equal ``b_bar``."""
    d = _check_distances(distances)
    offs = alpha * (L - 1) * np.log2(d)

    def total(eta):
        return sum(_expected_two_tier(eta - o, L) for o in offs)

    lo, hi = -10.0 * (L - 1) + offs.min(), b_bar + offs.max() + 10.0
    while total(hi) < b_bar:
        hi += b_bar + 10.0
    return float(optimize.brentq(lambda e: total(e) - b_bar, lo, hi, xtol=tol))


# ------------------------------------------------------------ misc


def throughput_loss_bound(avg_interference: float, sigma2: float) -> float:
    """Upper bound log2(1 + I / sigma^2) on the throughput lost to interference."""
    if avg_interference < 0 or sigma2 <= 0:
        raise ValueError("need avg_interference >= 0 and sigma2 > 0")
    return float(np.log2(1.0 + avg_interference / sigma2))
