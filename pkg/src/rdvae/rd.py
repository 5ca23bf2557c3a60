"""Classical rate-distortion helpers and the KL-as-rate check.

All rates are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# rate gap between uniform quantisation noise and Gaussian noise of equal power
RATE_OFFSET = 0.5 * math.log(math.pi * math.e / 6.0)


@dataclass(frozen=True)
class RdPoint:
    d: float
    R_opt: float
    D_opt: float


def rd_optimal(sigma2, d: float) -> RdPoint:
    """Reverse water-filling for independent Gaussian channels at per-channel distortion ``d``."""
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0) or not d > 0:
        raise ValueError("variances and d must be positive")
    rate = 0.5 * np.sum(np.maximum(np.log(sigma2 / d), 0.0))
    dist = np.sum(np.minimum(d, sigma2))
    return RdPoint(float(d), float(rate), float(dist))


def rd_curve(sigma2, d_values) -> list[RdPoint]:
    return [rd_optimal(sigma2, d) for d in d_values]


def quantizer_distortion(T: float, n: int = 1_000_000, seed: int = 0, source: str = "normal",
                         half_width: float = 1.0):
    """``(T^2/12, Monte-Carlo mean of (z - T round(z/T))^2)``.

    ``source`` is ``"normal"`` (standard normal) or ``"uniform"`` on
    ``[-half_width, half_width]``.
    """
    if not T > 0:
        raise ValueError("quantisation step must be positive")
    rng = np.random.default_rng(seed)
    if source == "normal":
        z = rng.standard_normal(n)
    elif source == "uniform":
        z = rng.uniform(-half_width, half_width, size=n)
    else:
        raise ValueError(f"unknown source {source!r}")
    err = z - T * np.round(z / T)
    return T * T / 12.0, float(np.mean(err * err))


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-10, max_depth: int = 50) -> float:
    """Adaptive Simpson quadrature with the usual /15 Richardson correction."""

    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15.0 * tol:
            return left + right + delta / 15.0
        return (recurse(a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(m, b, fm, frm, fb, right, tol / 2.0, depth - 1))

    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


def _std_normal_pdf(z: float) -> float:
    return math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def quant_rate(mu: float, sigma: float, tol: float = 1e-10) -> dict:
    """Rate of uniformly quantising a N(0,1) symbol at ``mu`` with noise power ``sigma^2``.

    The step is ``T = 2 sqrt(3) sigma`` so that ``T^2/12 = sigma^2``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    T = 2.0 * math.sqrt(3.0) * sigma
    prob = adaptive_simpson(_std_normal_pdf, mu - T / 2.0, mu + T / 2.0, tol)
    numeric = -math.log(prob)
    closed = 0.5 * (mu * mu + sigma * sigma - math.log(sigma * sigma) - math.log(6.0 / math.pi))
    kl = 0.5 * (mu * mu + sigma * sigma - math.log(sigma * sigma) - 1.0)
    return {"numeric": numeric, "closed": closed, "kl_plus_offset": kl + RATE_OFFSET}
