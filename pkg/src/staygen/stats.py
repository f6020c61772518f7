"""Self-contained statistical kernels: incomplete gamma/beta and derived
chi-squared and Pearson-correlation p-values.

Implementations follow the classic series / continued-fraction split
(series for the lower regularized gamma when x < s + 1, Lentz's method
otherwise; Lentz's method for the incomplete beta). Accuracy is driven
to ~1e-12, far below the tolerances at which the suite asserts.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError

_MAX_ITER = 500
_EPS = 1e-15
_TINY = 1e-300


def regularized_gamma_p(s: float, x: float) -> float:
    """Lower regularized incomplete gamma P(s, x)."""
    if s <= 0 or x < 0:
        raise DomainError("regularized_gamma_p requires s > 0, x >= 0")
    if x == 0.0:
        return 0.0
    if x < s + 1.0:
        return _gamma_p_series(s, x)
    return 1.0 - _gamma_q_contfrac(s, x)


def regularized_gamma_q(s: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(s, x) = 1 - P(s, x)."""
    if s <= 0 or x < 0:
        raise DomainError("regularized_gamma_q requires s > 0, x >= 0")
    if x == 0.0:
        return 1.0
    if x < s + 1.0:
        return 1.0 - _gamma_p_series(s, x)
    return _gamma_q_contfrac(s, x)


def _gamma_p_series(s: float, x: float) -> float:
    term = 1.0 / s
    total = term
    a = s
    for _ in range(_MAX_ITER):
        a += 1.0
        term *= x / a
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + s * math.log(x) - math.lgamma(s))


def _gamma_q_contfrac(s: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q
    b = x + 1.0 - s
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - s)
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
    return h * math.exp(-x + s * math.log(x) - math.lgamma(s))


def chi2_sf(x: float, df: int) -> float:
    """Survival function of the chi-squared distribution."""
    if df < 1:
        raise DomainError("df must be >= 1")
    if x < 0:
        return 1.0
    return min(1.0, max(0.0, regularized_gamma_q(df / 2.0, x / 2.0)))


def regularized_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise DomainError("regularized_beta requires a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise DomainError("regularized_beta requires x in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    # the continued fraction converges fastest for x < (a+1)/(a+b+2)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_contfrac(x, a, b) / a
    return 1.0 - math.exp(log_front) * _beta_contfrac(1.0 - x, b, a) / b


def _beta_contfrac(x: float, a: float, b: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
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


def student_t_sf(t: float, df: float) -> float:
    """Survival function of Student's t distribution."""
    if df <= 0:
        raise DomainError("df must be positive")
    x = df / (df + t * t)
    p = 0.5 * regularized_beta(x, df / 2.0, 0.5)
    return p if t >= 0 else 1.0 - p


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise DomainError("pearson_r requires two equal-length vectors, n >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        raise DomainError("pearson_r undefined for constant input")
    return float(np.clip((xc @ yc) / denom, -1.0, 1.0))


def pearson_r_pvalue(x, y) -> tuple[float, float]:
    """Pearson correlation with a two-sided p-value from the t distribution."""
    x = np.asarray(x, dtype=np.float64)
    r = pearson_r(x, y)
    n = x.size
    if n < 3:
        raise DomainError("p-value needs n >= 3")
    if abs(r) >= 1.0:
        return r, 0.0
    df = n - 2
    t = abs(r) * math.sqrt(df / (1.0 - r * r))
    return r, min(1.0, 2.0 * student_t_sf(t, df))
