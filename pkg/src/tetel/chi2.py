"""Chi-square tail probabilities and quantiles.

The regularized incomplete gamma function is evaluated with the usual split:
the power series for ``x < a + 1`` and a modified-Lentz continued fraction
otherwise.
"""

from __future__ import annotations

import math

import numpy as np

_EPS = 1e-14
_TINY = 1e-300
_MAX_ITER = 10_000


def _gamma_p_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    else:
        raise ArithmeticError(f"incomplete gamma series did not converge (a={a}, x={x})")
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_cfrac(a: float, x: float) -> float:
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
    else:
        raise ArithmeticError(f"incomplete gamma continued fraction did not converge (a={a}, x={x})")
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0 or x < 0 or not math.isfinite(a):
        raise ValueError(f"invalid arguments a={a}, x={x}")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_p_series(a, x))
    return min(1.0, _gamma_q_cfrac(a, x))


def gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma function P(a, x)."""
    if a <= 0 or x < 0 or not math.isfinite(a):
        raise ValueError(f"invalid arguments a={a}, x={x}")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return min(1.0, _gamma_p_series(a, x))
    return max(0.0, 1.0 - _gamma_q_cfrac(a, x))


def _check_df(k) -> int:
    if isinstance(k, bool) or int(k) != k or k < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {k!r}")
    return int(k)


def chi2_sf(x, k):
    """Upper-tail probability of a chi-square variable with `k` degrees of freedom.

    Accepts a scalar or an array for `x`; arrays are evaluated elementwise.
    """
    k = _check_df(k)
    if np.ndim(x) == 0:
        x = float(x)
        if not x >= 0:
            raise ValueError(f"chi2_sf requires x >= 0, got {x}")
        return gamma_q(k / 2.0, x / 2.0)
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr >= 0)):
        raise ValueError("chi2_sf requires x >= 0")
    out = np.array([gamma_q(k / 2.0, v / 2.0) for v in arr.ravel()])
    return out.reshape(arr.shape)


def chi2_cdf(x: float, k: int) -> float:
    k = _check_df(k)
    if not x >= 0:
        raise ValueError(f"chi2_cdf requires x >= 0, got {x}")
    return gamma_p(k / 2.0, x / 2.0)


def _chi2_pdf(x: float, k: int) -> float:
    if x <= 0:
        return 0.0 if k > 2 else (0.5 if k == 2 else math.inf)
    h = k / 2.0
    return math.exp((h - 1.0) * math.log(x) - x / 2.0 - h * math.log(2.0) - math.lgamma(h))


def chi2_quantile(q: float, k: int, tol: float = 1e-10) -> float:
    """Value `x` with ``P(X <= x) = q`` for ``X ~ chi2(k)``.

    Safeguarded Newton iteration inside a bisection bracket.
    """
    k = _check_df(k)
    q = float(q)
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    lo, hi = 0.0, max(1.0, float(k))
    while chi2_cdf(hi, k) < q:
        lo, hi = hi, 2.0 * hi
    x = 0.5 * (lo + hi)
    for _ in range(2000):
        f = chi2_cdf(x, k) - q
        if f == 0.0:
            return x
        if f > 0:
            hi = x
        else:
            lo = x
        dens = _chi2_pdf(x, k)
        x_new = x - f / dens if dens > 0 and math.isfinite(dens) else math.nan
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= tol * abs(x_new) or hi - lo <= tol * hi:
            return x_new
        x = x_new
    return x
