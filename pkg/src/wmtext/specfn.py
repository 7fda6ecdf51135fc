"""Special functions and distribution tails used for every p-value.

The incomplete beta is evaluated with the modified Lentz continued fraction,
switching to the symmetric form when ``x > (a+1)/(a+b+2)``.  The incomplete
gamma uses the power series for ``x < a+1`` and the continued fraction
otherwise.  Every tail has a log-space twin so that scores far beyond double
precision still report a finite ``log10(p)``.

Public p-values are clamped to ``[PVALUE_FLOOR, 1]``.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numba import njit

PVALUE_FLOOR = 1e-300
LN10 = math.log(10.0)

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 200_000


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _betacf(a, b, x):
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h


@njit(cache=True)
def _log_beta_front(a, b, x):
    return (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
            + a * math.log(x) + b * math.log1p(-x))


@njit(cache=True)
def _log_ibeta(x, a, b):
    """ln I_x(a, b) for 0 < x < 1."""
    front = _log_beta_front(a, b, x)
    if x < (a + 1.0) / (a + b + 2.0):
        return front + math.log(_betacf(a, b, x)) - math.log(a)
    # complement branch: I = 1 - front' * cf / b
    tail = math.exp(front + math.log(_betacf(b, a, 1.0 - x)) - math.log(b))
    return math.log1p(-tail)


@njit(cache=True)
def _log_gamma_series(a, x):
    """ln P(a, x) by the power series; valid for x < a + 1."""
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return math.log(total) - x + a * math.log(x) - math.lgamma(a)


@njit(cache=True)
def _log_gamma_cf(a, x):
    """ln Q(a, x) by the Lentz continued fraction; valid for x >= a + 1."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.log(h) - x + a * math.log(x) - math.lgamma(a)


@njit(cache=True)
def _log_gamma_q(a, x):
    if x <= 0.0:
        return 0.0
    if x < a + 1.0:
        return math.log1p(-math.exp(_log_gamma_series(a, x)))
    return _log_gamma_cf(a, x)


@njit(cache=True)
def _log_gamma_p(a, x):
    if x <= 0.0:
        return -math.inf
    if x < a + 1.0:
        return _log_gamma_series(a, x)
    return math.log1p(-math.exp(_log_gamma_cf(a, x)))


# ---------------------------------------------------------------------------
# public surface
# ---------------------------------------------------------------------------


def clamp_pvalue(p: float) -> float:
    if math.isnan(p):
        raise ValueError("p-value is NaN")
    return min(1.0, max(PVALUE_FLOOR, p))


def _from_log(logp: float) -> float:
    if logp >= 0.0:
        return 1.0
    return clamp_pvalue(math.exp(logp))


def log_reg_inc_beta(x: float, a: float, b: float) -> float:
    """Natural log of the regularized incomplete beta ``I_x(a, b)``."""
    if not (a > 0 and b > 0):
        raise ValueError(f"reg_inc_beta needs a, b > 0 (got a={a}, b={b})")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"reg_inc_beta needs 0 <= x <= 1 (got {x})")
    if x == 0.0:
        return -math.inf
    if x == 1.0:
        return 0.0
    return min(0.0, _log_ibeta(float(x), float(a), float(b)))


def reg_inc_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function ``I_x(a, b)``.

    Not clamped: this is a c.d.f. value, not a p-value.
    """
    return math.exp(log_reg_inc_beta(x, a, b))


def _check_binom(s: int, T: int, gamma: float) -> None:
    if T < 1:
        raise ValueError(f"binomial test needs T >= 1 (got {T})")
    if not 0 <= s <= T:
        raise ValueError(f"binomial score must satisfy 0 <= s <= T (got s={s}, T={T})")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1) (got {gamma})")


def binom_log_pvalue(s: int, T: int, gamma: float) -> float:
    """ln P(S >= s) for S ~ Binomial(T, gamma), without clamping."""
    _check_binom(s, T, gamma)
    if s == 0:
        return 0.0
    return min(0.0, _log_ibeta(float(gamma), float(s), float(T - s + 1)))


def binom_pvalue(s: int, T: int, gamma: float) -> float:
    """Exact upper tail ``P(S >= s)`` of a Binomial(T, gamma), as ``I_gamma(s, T-s+1)``."""
    return _from_log(binom_log_pvalue(s, T, gamma))


def gamma_log_pvalue(s: float, T: float) -> float:
    """ln P(S >= s) for S ~ Gamma(T, 1)."""
    if s < 0:
        raise ValueError(f"gamma score must be nonnegative (got {s})")
    if T <= 0:
        raise ValueError(f"gamma shape must be positive (got {T})")
    return min(0.0, _log_gamma_q(float(T), float(s)))


def gamma_pvalue(s: float, T: float) -> float:
    """Upper tail ``Gamma(T, s) / Gamma(T)`` of a sum of T unit exponentials."""
    return _from_log(gamma_log_pvalue(s, T))


def lower_gamma_log_pvalue(s: float, T: float) -> float:
    if s > 0:
        raise ValueError(f"score must be nonpositive (got {s})")
    if T <= 0:
        raise ValueError(f"gamma shape must be positive (got {T})")
    if math.isinf(s):
        return 0.0
    return min(0.0, _log_gamma_p(float(T), float(-s)))


def lower_gamma_pvalue(s: float, T: float) -> float:
    """``P(sum of T log-uniforms >= s) = gamma(T, -s) / Gamma(T)`` for s <= 0."""
    return _from_log(lower_gamma_log_pvalue(s, T))


def chi2_log_sf(x: float, df: float) -> float:
    """ln of the chi-square survival function."""
    return gamma_log_pvalue(max(0.0, x) / 2.0, df / 2.0)


def chi2_sf(x: float, df: float) -> float:
    return _from_log(chi2_log_sf(x, df))


def z_log_pvalue(z: float) -> float:
    if z < 5.0:
        return math.log(0.5 * math.erfc(z / math.sqrt(2.0)))
    # asymptotic expansion of the Mills ratio keeps the log finite
    z2 = z * z
    series = 1.0 - 1.0 / z2 + 3.0 / z2**2 - 15.0 / z2**3 + 105.0 / z2**4
    return -0.5 * z2 - math.log(z * math.sqrt(2.0 * math.pi)) + math.log(series)


def z_pvalue(z: float) -> float:
    """One-sided normal tail ``1 - Phi(z)``."""
    if math.isnan(z):
        raise ValueError("z is NaN")
    return clamp_pvalue(0.5 * math.erfc(z / math.sqrt(2.0)))


def fisher_log_combine(log_pvalues: Sequence[float]) -> float:
    """Fisher's method on natural-log p-values; returns the combined ln p."""
    logs = [float(v) for v in log_pvalues]
    if not logs:
        raise ValueError("fisher_combine needs at least one p-value")
    for v in logs:
        if math.isnan(v) or v > 0.0 or v == -math.inf:
            raise ValueError(f"invalid log p-value {v}")
    x_half = -sum(logs)
    return gamma_log_pvalue(x_half, len(logs))


def fisher_combine(pvalues: Sequence[float]) -> float:
    """Combine independent p-values: upper chi-square(2n) tail at ``-2 sum ln p``."""
    ps = list(pvalues)
    if not ps:
        raise ValueError("fisher_combine needs at least one p-value")
    for p in ps:
        if not 0.0 < p <= 1.0:
            raise ValueError(f"p-values must lie in (0, 1] (got {p})")
    return _from_log(fisher_log_combine([math.log(p) for p in ps]))


def kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """Asymptotic Kolmogorov tail ``Q(lam) = 2 sum (-1)^(j-1) exp(-2 j^2 lam^2)``."""
    if lam < 0.2:
        return 1.0
    j = np.arange(1, terms + 1, dtype=np.float64)
    signs = np.where(j % 2 == 1, 1.0, -1.0)
    q = 2.0 * float(np.sum(signs * np.exp(-2.0 * j * j * lam * lam)))
    return clamp_pvalue(q)


def ks_two_sample(sample_a: Sequence[float], sample_b: Sequence[float]) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov distance and its asymptotic p-value."""
    a = np.sort(np.asarray(sample_a, dtype=np.float64))
    b = np.sort(np.asarray(sample_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    stat = float(np.max(np.abs(cdf_a - cdf_b)))
    n_eff = a.size * b.size / (a.size + b.size)
    return stat, kolmogorov_sf(math.sqrt(n_eff) * stat)


def log10(logp: float) -> float:
    """Convert a natural-log p-value to log10."""
    return logp / LN10
