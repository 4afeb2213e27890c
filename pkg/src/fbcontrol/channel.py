"""Temporally correlated Rayleigh MISO channels and transmitter-side CSI state."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import j0

from .quantizer import QuantizationOutcome


class FadingMode(str, enum.Enum):
    BLOCK_IID = "block_iid"
    AR1 = "ar1"


def clarke_rho(f_d: float) -> float:
    """Lag-1 correlation J0(2 pi f_d) of Clarke's model at normalized Doppler ``f_d``."""
    return float(j0(2.0 * np.pi * f_d))


def cn(rng: np.random.Generator, shape) -> np.ndarray:
    """Unit-variance circularly-symmetric complex Gaussian samples."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


@dataclass(frozen=True)
class ChannelVector:
    h: np.ndarray

    @property
    def g(self):
        return np.sum(np.abs(self.h) ** 2, axis=-1)

    @property
    def s(self) -> np.ndarray:
        return self.h / np.linalg.norm(self.h, axis=-1, keepdims=True)


@dataclass
class FadingProcess:
    """A bank of independent fading channels of length ``L``.

    ``shape`` is the batch shape (links, trials, ...). Under ``AR1`` every
    coefficient follows h' = rho h + sqrt(1 - rho^2) w, which keeps the
    CN(0, 1) marginal. The first state is drawn from the stationary law.
    """

    L: int
    mode: FadingMode = FadingMode.AR1
    rho_c: float = 0.0
    shape: tuple = ()
    seed: Optional[int] = None
    rng: Optional[np.random.Generator] = None
    h: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mode = FadingMode(self.mode)
        if not 0.0 <= self.rho_c <= 1.0:
            raise ValueError("rho_c must lie in [0, 1]")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)
        self.shape = tuple(self.shape)
        self.h = cn(self.rng, self.shape + (self.L,))

    @classmethod
    def from_doppler(cls, L: int, f_d: float, **kw) -> "FadingProcess":
        return cls(L=L, mode=FadingMode.AR1, rho_c=clarke_rho(f_d), **kw)

    @property
    def state(self) -> ChannelVector:
        return ChannelVector(self.h)

    def advance(self) -> ChannelVector:
        w = cn(self.rng, self.h.shape)
        if self.mode is FadingMode.BLOCK_IID:
            self.h = w
        else:
            self.h = self.rho_c * self.h + np.sqrt(1.0 - self.rho_c ** 2) * w
        return ChannelVector(self.h)


def csit_error(s: np.ndarray, u: np.ndarray):
    """delta = 1 - |s^H u|^2, batched over leading axes."""
    return np.clip(1.0 - np.abs(np.sum(s.conj() * u, axis=-1)) ** 2, 0.0, 1.0)


@dataclass(frozen=True)
class CsitState:
    u: np.ndarray
    delta: float


def update_csit(state: CsitState, outcome: QuantizationOutcome, new_s: np.ndarray):
    """Apply one slot's feedback outcome.

    Returns ``(delta_check, next_state)``: the CSIT error that holds during the
    data phase of this slot, and the state at the start of the next slot
    measured against the new channel direction ``new_s``.
    """
    if outcome.is_feedback:
        u = outcome.quantized_direction
        delta_check = outcome.error
    else:
        u = state.u
        delta_check = state.delta
    return delta_check, CsitState(u=u, delta=float(csit_error(new_s, u)))


@dataclass(frozen=True)
class OrthoDecomposition:
    beta: float
    delta: float
    q: Optional[np.ndarray]


def decompose(s: np.ndarray, u: np.ndarray, f: np.ndarray, eps: float = 1e-14) -> OrthoDecomposition:
    """Split ``s`` into its component along ``u`` and a unit residual ``q``.

    ``q`` is phased so that s^H q is real and nonnegative; then
    s = sqrt(1 - delta) e^{j phi} u + sqrt(delta) q with phi = arg(u^H s).
    Returns beta = |f^H q|^2 (0 when delta vanishes and q is undefined).
    """
    c = np.vdot(u, s)
    r = s - c * u
    nr = np.linalg.norm(r)
    delta = float(max(0.0, 1.0 - abs(c) ** 2))
    if nr <= eps:
        return OrthoDecomposition(beta=0.0, delta=0.0, q=None)
    q = r / nr
    # s^H q = |r| >= 0 already; keep the convention explicit
    phase = np.vdot(s, q)
    q = q * np.exp(-1j * np.angle(phase))
    return OrthoDecomposition(beta=float(abs(np.vdot(f, q)) ** 2), delta=delta, q=q)
