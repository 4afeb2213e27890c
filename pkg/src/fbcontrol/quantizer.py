"""CSI quantization error models and a random-codebook quantizer.

Errors are squared chordal distances ``1 - |s_hat^H s|^2`` between a unit
channel direction and its quantized version.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import betaln

# Largest codebook drawn explicitly; above this the exact RVQ error law is
# sampled instead (2**16 codewords of length L is already ~1 MB per draw).
MAX_CODEBOOK_BITS = 16


class QuantizerKind(str, enum.Enum):
    SPHERE_CAP = "sphere_cap"
    RVQ_ANALYTIC = "rvq_analytic"
    RVQ_CODEBOOK = "rvq_codebook"


def _check_L(L: int) -> None:
    if int(L) != L or L < 2:
        raise ValueError(f"antenna count must be an integer >= 2, got {L}")


def _check_tau(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    if np.any((tau < 0) | (tau > 1)) or np.any(np.isnan(tau)):
        raise ValueError("tau must lie in [0, 1]")
    return tau


def sphere_cap_cdf(tau, B, L):
    """Pr(error <= tau | B) for the sphere-cap model."""
    _check_L(L)
    tau = _check_tau(tau)
    B = np.asarray(B, dtype=float)
    cap = 2.0 ** (-B / (L - 1))
    out = np.where(tau <= cap, np.minimum(2.0 ** B * tau ** (L - 1), 1.0), 1.0)
    return out[()] if out.ndim == 0 else out


def sphere_cap_mean(B, L):
    _check_L(L)
    B = np.asarray(B, dtype=float)
    out = (L - 1) / L * 2.0 ** (-B / (L - 1))
    return out[()] if out.ndim == 0 else out


def rvq_tail(tau, B, L):
    """Pr(error >= tau | B) for random vector quantization."""
    _check_L(L)
    tau = _check_tau(tau)
    B = np.asarray(B, dtype=float)
    # (1 - x)^(2^B) evaluated in log space so large B does not underflow early
    x = tau ** (L - 1)
    with np.errstate(divide="ignore"):
        log_base = np.log1p(-np.minimum(x, 1.0))
    out = np.where(x >= 1.0, 0.0, np.exp(2.0 ** B * log_base))
    return out[()] if out.ndim == 0 else out


def rvq_mean(B, L):
    """Exact mean RVQ error ``2^B * beta(2^B, L/(L-1))`` via the log-beta function.

    ``betaln`` uses an asymptotic form for large arguments, so this stays
    accurate where ``gammaln(n) - gammaln(n + a)`` would cancel.
    """
    _check_L(L)
    B = np.asarray(B, dtype=float)
    n = 2.0 ** B
    a = L / (L - 1)
    out = np.exp(np.log(n) + betaln(n, a))
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class QuantizerModel:
    kind: QuantizerKind = QuantizerKind.SPHERE_CAP
    L: int = 4
    seed: Optional[int] = None

    def __post_init__(self):
        _check_L(self.L)
        object.__setattr__(self, "kind", QuantizerKind(self.kind))

    def mean_error(self, B):
        if self.kind is QuantizerKind.SPHERE_CAP:
            return sphere_cap_mean(B, self.L)
        return rvq_mean(B, self.L)

    def cdf(self, tau, B):
        """Pr(error <= tau | B)."""
        if self.kind is QuantizerKind.SPHERE_CAP:
            return sphere_cap_cdf(tau, B, self.L)
        return 1.0 - rvq_tail(tau, B, self.L)

    def sample_error(self, B, rng: np.random.Generator, size=None) -> np.ndarray:
        """Draw errors from the model's analytic law by inverting its CDF.

        ``B`` broadcasts against ``size``.
        """
        B = np.asarray(B, dtype=float)
        shape = B.shape if size is None else np.broadcast_shapes(B.shape, tuple(np.atleast_1d(size)))
        return self.error_from_uniform(B, rng.random(shape))

    def error_from_uniform(self, B, v):
        """The inverse-CDF map from uniforms ``v`` to errors (monotone in B)."""
        B = np.asarray(B, dtype=float)
        p = self.L - 1
        if self.kind is QuantizerKind.SPHERE_CAP:
            return v ** (1.0 / p) * 2.0 ** (-B / p)
        # Pr(eps >= tau) = (1 - tau^p)^(2^B)  =>  tau = (1 - v^(2^-B))^(1/p)
        return (-np.expm1(np.log(v) * 2.0 ** (-B))) ** (1.0 / p)


@dataclass(frozen=True)
class QuantizationOutcome:
    """Result of one feedback event.

    ``quantized_direction`` is None only for the no-feedback outcome.
    """

    quantized_direction: Optional[np.ndarray]
    error: float
    bits_used: int

    @property
    def is_feedback(self) -> bool:
        return self.bits_used > 0


NO_FEEDBACK = QuantizationOutcome(quantized_direction=None, error=1.0, bits_used=0)


def random_directions(rng: np.random.Generator, shape, L: int) -> np.ndarray:
    """Isotropic unit vectors in C^L, shape ``shape + (L,)``."""
    shape = tuple(np.atleast_1d(shape)) if shape != () else ()
    z = rng.standard_normal(shape + (L,)) + 1j * rng.standard_normal(shape + (L,))
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def orthogonal_directions(s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random unit vectors orthogonal to each row of ``s`` (uniform on the complement)."""
    z = rng.standard_normal(s.shape) + 1j * rng.standard_normal(s.shape)
    z = z - s * np.sum(s.conj() * z, axis=-1, keepdims=True)
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def at_distance(s: np.ndarray, error, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors whose squared chordal distance to ``s`` equals ``error``."""
    error = np.asarray(error, dtype=float)[..., None]
    q = orthogonal_directions(s, rng)
    return np.sqrt(1.0 - error) * s + np.sqrt(error) * q


def rvq_codebook_quantize(s: np.ndarray, B: int, rng: np.random.Generator, batch: int = 1 << 18):
    """Quantize rows of ``s`` with fresh 2^B-word isotropic codebooks.

    Returns (quantized directions, errors).
    """
    s = np.atleast_2d(s)
    n, L = s.shape
    size = 2 ** int(B)
    out = np.empty_like(s)
    err = np.empty(n)
    step = max(1, batch // size)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        # unnormalized Gaussian codewords; the score divides by the norm
        re = rng.standard_normal((hi - lo, size, L), dtype=np.float32)
        im = rng.standard_normal((hi - lo, size, L), dtype=np.float32)
        sr, si = s[lo:hi].real.astype(np.float32), s[lo:hi].imag.astype(np.float32)
        ip_re = np.einsum("kcl,kl->kc", re, sr) + np.einsum("kcl,kl->kc", im, si)
        ip_im = np.einsum("kcl,kl->kc", re, si) - np.einsum("kcl,kl->kc", im, sr)
        norm2 = np.einsum("kcl,kcl->kc", re, re) + np.einsum("kcl,kcl->kc", im, im)
        score = (ip_re ** 2 + ip_im ** 2) / norm2
        best = np.argmax(score, axis=1)
        idx = np.arange(hi - lo)
        w = re[idx, best].astype(float) + 1j * im[idx, best].astype(float)
        w /= np.linalg.norm(w, axis=-1, keepdims=True)
        out[lo:hi] = w
        err[lo:hi] = 1.0 - np.abs(np.sum(w.conj() * s[lo:hi], axis=-1)) ** 2
    return out, np.clip(err, 0.0, 1.0)


def quantize_many(s: np.ndarray, B, model: QuantizerModel, rng: np.random.Generator):
    """Vectorized quantization of rows of ``s`` with per-row bit counts ``B`` > 0.

    Returns (quantized directions, errors).
    """
    s = np.atleast_2d(s)
    B = np.broadcast_to(np.asarray(B, dtype=int), s.shape[:1])
    if np.any(B <= 0):
        raise ValueError("quantize_many expects positive bit counts")
    if model.kind is QuantizerKind.RVQ_CODEBOOK:
        out = np.empty_like(s)
        err = np.empty(s.shape[0])
        for b in np.unique(B):
            sel = B == b
            if b <= MAX_CODEBOOK_BITS:
                out[sel], err[sel] = rvq_codebook_quantize(s[sel], int(b), rng)
            else:
                err[sel] = model.sample_error(b, rng, size=int(sel.sum()))
                out[sel] = at_distance(s[sel], err[sel], rng)
        return out, err
    err = model.sample_error(B, rng)
    return at_distance(s, err, rng), err


def quantize(direction: np.ndarray, B: int, model: QuantizerModel,
             rng: Optional[np.random.Generator] = None) -> QuantizationOutcome:
    """Quantize one unit direction with ``B`` bits; ``B == 0`` means no feedback."""
    direction = np.asarray(direction, dtype=complex)
    if direction.shape != (model.L,):
        raise ValueError(f"direction must have shape ({model.L},)")
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must be unit norm")
    if B < 0:
        raise ValueError("B must be nonnegative")
    if B == 0:
        return NO_FEEDBACK
    if rng is None:
        rng = np.random.default_rng(model.seed)
    s_hat, err = quantize_many(direction[None, :], int(B), model, rng)
    return QuantizationOutcome(quantized_direction=s_hat[0], error=float(err[0]), bits_used=int(B))
