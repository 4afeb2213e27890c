"""Monte Carlo simulation of the K-user MISO interference channel.

Every transmitter zero-forces the CSIT it holds for the channels to its
unintended receivers and, within that null space, points at its own receiver
(the direct link is known perfectly). The simulator is vectorized over trials
and links; channel randomness comes from its own stream so that different
feedback schemes can be compared on identical channel realizations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from .channel import FadingMode, FadingProcess, clarke_rho, cn, csit_error
from .mdp import Policy, TransitionKernel, StateGrid, solve_budgeted
from .quantizer import QuantizerKind, QuantizerModel, quantize_many

Z95 = 1.959963984540054


# ------------------------------------------------------------------ schemes


@dataclass(frozen=True)
class PerfectCsit:
    """Transmitters know every interference channel exactly."""


@dataclass(frozen=True)
class Simple:
    """Fixed-resolution feedback in every slot on every link."""

    bits: int = 8


@dataclass(frozen=True)
class Differential:
    """Differential feedback s_t = (sqrt(1 - nu^2) + nu Lambda) s_{t-1}, renormalized."""

    codebook_bits: int = 8
    nu: float = 0.1


@dataclass(frozen=True)
class Controlled:
    """Feedback decided per slot from (g, delta).

    ``policy`` is a decision table (:class:`Policy`) or any object with a
    ``bits(g, delta)`` method returning continuous bits (floored here).
    ``link_policies`` optionally overrides it per (receiver, transmitter).
    """

    policy: Any
    link_policies: Optional[Mapping] = None

    def policy_for(self, m: int, n: int):
        if self.link_policies and (m, n) in self.link_policies:
            return self.link_policies[(m, n)]
        return self.policy

    def decide(self, g: np.ndarray, delta: np.ndarray, m: int, n: int) -> np.ndarray:
        pol = self.policy_for(m, n)
        B = np.asarray(pol.bits(g, delta))
        if not isinstance(pol, Policy):
            B = np.floor(np.maximum(B, 0.0))
        return B.astype(int)

    def table_decisions(self) -> Optional[int]:
        """D for table policies (number of distinct decisions), else None."""
        pols = [self.policy] + list((self.link_policies or {}).values())
        if all(isinstance(p, Policy) for p in pols):
            return int(np.unique(np.concatenate([np.ravel(p.table) for p in pols])).size)
        return None


Scheme = Union[PerfectCsit, Simple, Differential, Controlled]


def scheme_name(scheme: Scheme) -> str:
    return type(scheme).__name__


def overhead_bits(D: int) -> int:
    """Per-link, per-slot bits needed to announce one of D decisions."""
    return int(math.ceil(math.log2(D))) if D > 1 else 0


# ------------------------------------------------------------------ config


@dataclass
class NetworkConfig:
    K: int = 3
    L: int = 4
    B_set: tuple = tuple(range(0, 31, 2))
    snr_db: tuple = (13.0,)
    f_d: float = 1e-2
    fading_mode: str = "ar1"
    distances: Optional[Any] = None
    alpha: float = 3.0
    scheme: Any = field(default_factory=PerfectCsit)
    slots: int = 1000
    trials: int = 50
    seed: int = 0
    warmup: int = 100
    quantizer: str = "sphere_cap"

    def __post_init__(self):
        self.snr_db = tuple(float(x) for x in np.atleast_1d(self.snr_db))
        self.B_set = tuple(int(b) for b in self.B_set)
        self.validate()

    def validate(self) -> None:
        if self.K < 2:
            raise ValueError("need K >= 2 users")
        if self.L < self.K:
            raise ValueError("zero-forcing needs L >= K")
        if self.slots < 1 or self.trials < 1 or self.warmup < 0:
            raise ValueError("slots and trials must be positive, warmup nonnegative")
        FadingMode(self.fading_mode)
        QuantizerKind(self.quantizer)
        if not 0.0 <= self.f_d < 0.5:
            raise ValueError("f_d must lie in [0, 0.5)")
        if np.any(self.distance_matrix() <= 0):
            raise ValueError("distances must be positive")

    @property
    def sigma2(self) -> np.ndarray:
        return 10.0 ** (-np.asarray(self.snr_db) / 10.0)

    @property
    def rho_c(self) -> float:
        return 0.0 if FadingMode(self.fading_mode) is FadingMode.BLOCK_IID else clarke_rho(self.f_d)

    def distance_matrix(self) -> np.ndarray:
        """K x K distances d[m, n] from transmitter n to receiver m (diagonal 1).

        ``distances`` may be None (all ones), a full K x K matrix, or a list
        of K - 1 values giving every receiver's interferers in index order.
        """
        K = self.K
        if self.distances is None:
            return np.ones((K, K))
        d = np.asarray(self.distances, dtype=float)
        if d.shape == (K, K):
            out = d.copy()
        elif d.shape == (K - 1,):
            out = np.ones((K, K))
            for m in range(K):
                out[m, [n for n in range(K) if n != m]] = d
        else:
            raise ValueError(f"distances must have shape ({K},{K}) or ({K - 1},)")
        np.fill_diagonal(out, 1.0)
        return out


@dataclass
class SimResult:
    """Averages over trials and post-warm-up slots.

    Feedback rates are per user (summed over its K - 1 feedback links) in
    bits per slot; ``avg_feedback_rate`` includes the control overhead.
    """

    scheme: str
    snr_db: tuple
    throughput_per_user: np.ndarray
    throughput_halfwidth: np.ndarray
    avg_interference_per_rx: float
    interference_halfwidth: float
    avg_feedback_bits: float
    overhead_per_user: float
    avg_csit_error: float
    trial_throughput: np.ndarray = field(repr=False)
    decisions: int = 0

    @property
    def avg_feedback_rate(self) -> float:
        return self.avg_feedback_bits + self.overhead_per_user

    @property
    def confidence_halfwidth(self) -> np.ndarray:
        return self.throughput_halfwidth


# ------------------------------------------------------------------ building blocks


def zf_beamformer(interference_csit: np.ndarray, L: Optional[int] = None,
                  rng: Optional[np.random.Generator] = None, direct: Optional[np.ndarray] = None,
                  tol: float = 1e-10) -> np.ndarray:
    """Unit beamformers orthogonal to every CSIT vector, batched over leading axes.

    ``interference_csit`` has shape (..., k, L). Within the null space the
    beamformer is the projection of ``direct`` (maximum-ratio direction) or,
    when that is absent or vanishes, of an isotropic random vector. Linearly
    dependent constraints are handled by orthonormalizing with a rank test.
    """
    U = np.asarray(interference_csit, dtype=complex)
    L = U.shape[-1] if L is None else L
    if U.shape[-1] != L:
        raise ValueError("CSIT vectors have the wrong length")
    if U.shape[-2] > L - 1:
        raise ValueError("need at most L - 1 constraints")
    rng = rng if rng is not None else np.random.default_rng()
    basis = []
    for j in range(U.shape[-2]):
        v = U[..., j, :].copy()
        for _ in range(2):          # re-orthogonalize for numerical stability
            for b in basis:
                v -= b * np.sum(b.conj() * v, axis=-1, keepdims=True)
        nv = np.linalg.norm(v, axis=-1, keepdims=True)
        basis.append(np.where(nv > tol, v / np.where(nv > tol, nv, 1.0), 0.0))

    def project(x):
        for _ in range(2):
            for b in basis:
                x = x - b * np.sum(b.conj() * x, axis=-1, keepdims=True)
        return x

    batch = U.shape[:-2] + (L,)
    x = project(cn(rng, batch) if direct is None else np.asarray(direct, dtype=complex).copy())
    nx = np.linalg.norm(x, axis=-1, keepdims=True)
    bad = nx[..., 0] <= tol
    if np.any(bad):
        alt = project(cn(rng, batch))
        x = np.where(bad[..., None], alt, x)
        nx = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / nx


def make_codebook(bits: int, L: int, rng: np.random.Generator) -> np.ndarray:
    """2^bits L x L matrices with i.i.d. CN(0, 1) entries."""
    return cn(rng, (2 ** int(bits), L, L))


def differential_feedback_update(prev_csit: np.ndarray, true_s: np.ndarray, nu: float,
                                 codebook: np.ndarray) -> np.ndarray:
    """Best codeword update of the previous CSIT, renormalized to unit norm.

    Batched over leading axes of ``prev_csit`` / ``true_s``.
    """
    prev = np.asarray(prev_csit, dtype=complex)
    true_s = np.asarray(true_s, dtype=complex)
    C, L = codebook.shape[0], codebook.shape[-1]
    lead = prev.shape[:-1]
    p2 = prev.reshape(-1, L)
    a = np.sqrt(1.0 - nu ** 2)
    # rows of cand: a prev + nu Lambda_c prev for every codeword c (one BLAS call)
    cand = (p2 @ codebook.reshape(C * L, L).T).reshape(-1, C, L)
    cand *= nu
    cand += a * p2[:, None, :]
    norm2 = np.einsum("ncl,ncl->nc", cand.real, cand.real) + np.einsum("ncl,ncl->nc", cand.imag, cand.imag)
    proj = np.matmul(cand.conj(), true_s.reshape(-1, L, 1))[..., 0]
    best = np.argmax((proj.real ** 2 + proj.imag ** 2) / norm2, axis=-1)
    rows = np.arange(cand.shape[0])
    out = cand[rows, best] / np.sqrt(norm2[rows, best])[:, None]
    return out.reshape(lead + (L,))


def interference_power(f: np.ndarray, h: np.ndarray) -> np.ndarray:
    """|f^H h|^2 batched; equals g |f^H s|^2."""
    return np.abs(np.sum(f.conj() * h, axis=-1)) ** 2


# ------------------------------------------------------------------ simulation


def _streams(seed: int):
    ch, q, cb = np.random.SeedSequence(int(seed)).spawn(3)
    return np.random.default_rng(ch), np.random.default_rng(q), np.random.default_rng(cb)


def run_simulation(config: NetworkConfig, return_trace: bool = False):
    """Simulate ``config.trials`` independent networks for ``config.slots`` slots.

    With ``return_trace`` a dict of the last slot's arrays is returned as well
    (used to check the interference decomposition).
    """
    config.validate()
    K, L, T = config.K, config.L, config.trials
    scheme = config.scheme
    rng_ch, rng_q, rng_cb = _streams(config.seed)
    model = QuantizerModel(config.quantizer, L)
    fading = FadingProcess(L=L, mode=config.fading_mode, rho_c=config.rho_c, shape=(T, K, K), rng=rng_ch)
    dist = config.distance_matrix()
    pathloss = dist ** (-config.alpha)
    off = ~np.eye(K, dtype=bool)
    links = [(m, n) for m in range(K) for n in range(K) if m != n]
    others = np.array([[m for m in range(K) if m != n] for n in range(K)])
    sigma2 = config.sigma2

    h = fading.h
    s = h / np.linalg.norm(h, axis=-1, keepdims=True)
    u = s.copy()
    if not isinstance(scheme, PerfectCsit):
        # start-up report at the finest resolution of the decision set
        q, _ = quantize_many(s.reshape(-1, L), max(max(config.B_set), 1), model, rng_q)
        u = q.reshape(s.shape)
    codebook = make_codebook(scheme.codebook_bits, L, rng_cb) if isinstance(scheme, Differential) else None

    n_snr = len(sigma2)
    acc_rate = np.zeros((T, n_snr))
    acc_I = np.zeros(T)
    acc_bits = 0.0
    acc_err = 0.0
    used = set()
    trace = None
    for t in range(config.warmup + config.slots):
        if t > 0:
            h = fading.advance().h
        g = np.sum(np.abs(h) ** 2, axis=-1)
        s = h / np.sqrt(g)[..., None]
        bits = np.zeros((T, K, K), dtype=int)
        if isinstance(scheme, PerfectCsit):
            u = s.copy()
        elif isinstance(scheme, Simple):
            if scheme.bits > 0:
                q, _ = quantize_many(s[:, off].reshape(-1, L), scheme.bits, model, rng_q)
                u[:, off] = q.reshape(T, -1, L)
                bits[:, off] = scheme.bits
        elif isinstance(scheme, Differential):
            u[:, off] = differential_feedback_update(u[:, off], s[:, off], scheme.nu, codebook)
            bits[:, off] = scheme.codebook_bits
        elif isinstance(scheme, Controlled):
            delta = csit_error(s, u)
            for m, n in links:
                bits[:, m, n] = scheme.decide(g[:, m, n], delta[:, m, n], m, n)
            fb = bits > 0
            if fb.any():
                q, _ = quantize_many(s[fb], bits[fb], model, rng_q)
                u[fb] = q
        else:
            raise TypeError(f"unknown scheme {scheme!r}")

        f = zf_beamformer(u[:, others, np.arange(K)[:, None], :], L, rng_q, direct=h[:, np.arange(K), np.arange(K)])
        # I[m, n]: power from transmitter n at receiver m
        I = interference_power(f[:, None, :, :], h) * pathloss
        I[:, ~off] = 0.0
        S = interference_power(f, h[:, np.arange(K), np.arange(K)])
        if t < config.warmup:
            continue
        I_rx = I.sum(axis=2)
        acc_I += I_rx.mean(axis=1)
        acc_rate += np.log2(1.0 + S[:, :, None] / (sigma2 + I_rx[:, :, None])).mean(axis=1)
        acc_bits += bits[:, off].sum() / (T * K)
        acc_err += csit_error(s, u)[:, off].mean()
        if isinstance(scheme, Controlled):
            used.update(np.unique(bits[:, off]).tolist())
        if return_trace and t == config.warmup + config.slots - 1:
            trace = dict(h=h, g=g, s=s, u=u.copy(), f=f, I=I, S=S)

    n = config.slots
    per_trial = acc_rate / n
    I_trial = acc_I / n
    se = per_trial.std(axis=0, ddof=1) / np.sqrt(T) if T > 1 else np.full(n_snr, np.nan)
    se_I = I_trial.std(ddof=1) / np.sqrt(T) if T > 1 else np.nan
    D = 0
    ov = 0.0
    if isinstance(scheme, Controlled):
        D = scheme.table_decisions() or len(used | {0})
        ov = float((K - 1) * overhead_bits(D))
    res = SimResult(scheme=scheme_name(scheme), snr_db=config.snr_db,
                    throughput_per_user=per_trial.mean(axis=0), throughput_halfwidth=Z95 * se,
                    avg_interference_per_rx=float(I_trial.mean()), interference_halfwidth=float(Z95 * se_I),
                    avg_feedback_bits=float(acc_bits / n), overhead_per_user=ov,
                    avg_csit_error=float(acc_err / n), trial_throughput=per_trial, decisions=D)
    return (res, trace) if return_trace else res


# ------------------------------------------------------------------ scheme tuning


def tune_differential_nu(config: NetworkConfig, codebook_bits: int = 8,
                         nus: Sequence[float] = (0.005, 0.01, 0.015, 0.02, 0.03, 0.04, 0.06, 0.08, 0.1, 0.15, 0.2, 0.3),
                         slots: int = 300, trials: int = 16) -> float:
    """Grid search for the throughput-maximizing differential step at config's first SNR."""
    best, best_nu = -np.inf, nus[0]
    for nu in nus:
        cfg = _replace(config, scheme=Differential(codebook_bits, float(nu)), slots=slots, trials=trials)
        thr = run_simulation(cfg).throughput_per_user[0]
        if thr > best:
            best, best_nu = thr, float(nu)
    return best_nu


def _replace(config: NetworkConfig, **kw) -> NetworkConfig:
    from dataclasses import replace
    return replace(config, **kw)


def controlled_policy_for_total(kernel: TransitionKernel, grid: StateGrid, total_per_user: float,
                                K: int, max_rounds: int = 20) -> tuple:
    """Budgeted policy whose payload plus control overhead fits ``total_per_user``.

    Returns (policy, payload budget per user). The payload budget starts at
    the total and is lowered by the overhead of the policy found until the
    pair is consistent.
    """
    b = float(total_per_user)
    for _ in range(max_rounds):
        pol = solve_budgeted(kernel, grid, max(b, 0.0) / (K - 1))
        ov = (K - 1) * overhead_bits(pol.num_decisions)
        if (K - 1) * pol.avg_rate + ov <= total_per_user + 1e-9:
            return pol, b
        b = min(b - 1e-6, total_per_user - ov)
    pol = solve_budgeted(kernel, grid, 0.0)
    return pol, 0.0
