"""Special functions used by the spectral integrals.

E1 is evaluated by its power series for x < 1 and by a modified-Lentz
continued fraction for x >= 1; every "integral of exp(-lambda t) dt/t from a
to infinity" in the key formula is E1(lambda * a), so this routine sits on the
hot path and is kept dependency-free (scipy.special.exp1 is used only as a
test oracle).
"""

from __future__ import annotations

import math

import numpy as np

EULER_GAMMA = 0.5772156649015329

_TINY = 1e-300


def e1_scalar(x: float) -> float:
    """Exponential integral E1(x) for x > 0, relative error < 1e-13."""
    if x <= 0.0:
        raise ValueError("E1 requires x > 0")
    if x < 1.5:
        # E1(x) = -gamma - ln x + sum_{k>=1} (-1)^{k+1} x^k / (k k!)
        total = -EULER_GAMMA - math.log(x)
        term = 1.0
        for k in range(1, 60):
            term *= -x / k
            contrib = -term / k
            total += contrib
            if abs(contrib) < 1e-18 * max(1.0, abs(total)):
                break
        return total
    if x > 700.0:
        return 0.0
    # modified Lentz for the continued fraction
    # E1(x) = e^{-x} / (x + 1 - 1/(x + 3 - 4/(x + 5 - 9/(...))))
    b = x + 1.0
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for k in range(1, 200):
        a = -k * k
        b += 2.0
        d = 1.0 / (a * d + b)
        c = b + a / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x) * h


def e1(x):
    """Vectorized E1 over positive arguments (numpy array or scalar)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return e1_scalar(float(arr))
    out = np.empty_like(arr)
    flat = arr.ravel()
    oflat = out.ravel()
    for i, v in enumerate(flat):
        oflat[i] = e1_scalar(float(v))
    return out


def exp_window_integral(lam, a: float, b: float):
    """Integral of exp(-lam t) dt/t over [a, b], elementwise in lam (lam >= 0).

    Zero eigenvalues contribute log(b/a).
    """
    lam = np.asarray(lam, dtype=float)
    out = np.empty_like(lam)
    zero = lam <= 0.0
    out[zero] = math.log(b / a)
    nz = ~zero
    out[nz] = e1(lam[nz] * a) - e1(lam[nz] * b)
    return out


def catalan_constant() -> float:
    """Catalan's constant by the fast central-binomial series.

    G = (pi/8) log(2 + sqrt(3)) + (3/8) sum_{n>=0} (n!)^2 / ((2n)! (2n+1)^2).
    Terms decay like 4^{-n}; 30 terms give full double precision.
    """
    total = 0.0
    term = 1.0  # (n!)^2 / (2n)! at n = 0
    for n in range(0, 40):
        total += term / (2 * n + 1) ** 2
        term *= (n + 1.0) * (n + 1.0) / ((2 * n + 1.0) * (2 * n + 2.0))
    return math.pi / 8.0 * math.log(2.0 + math.sqrt(3.0)) + 3.0 / 8.0 * total


def poisson_tail(mu: float, k: int) -> float:
    """Upper bound on P(Poisson(mu) >= k), monotone in mu; exact regularized gamma."""
    if k <= 0:
        return 1.0
    if mu <= 0.0:
        return 0.0
    # P(X >= k) = gammainc_lower(k, mu) (regularized); use the series bound
    # (mu^k / k!) * 1/(1 - mu/(k+1)) valid for mu < k+1, else 1.
    if mu >= k + 1:
        return 1.0
    log_term = k * math.log(mu) - math.lgamma(k + 1)
    return min(1.0, math.exp(log_term) / (1.0 - mu / (k + 1)))


def small_time_cutoff(w_max: float, g: int, tol: float = 1e-14) -> float:
    """Largest t_cut with int_0^{t_cut} 2 P(Pois(w_max t) >= g) dt/t < tol.

    Uses the bound P(Pois(mu) >= g) <= mu^g/g! for mu < 1, so the integral is
    bounded by 2 (w t_cut)^g / (g g!).
    """
    g = max(1, g)
    log_t = (math.log(tol * g / 2.0) + math.lgamma(g + 1)) / g - math.log(w_max)
    t_cut = math.exp(min(log_t, 0.0))
    return min(t_cut, 0.5 / w_max)
