"""Scalar special functions on float64 arrays.

Everything here is elementwise, deterministic, and accepts scalars or
ndarrays. The log-gamma implementation is a Lanczos approximation
(g = 7, nine coefficients) with the reflection formula below 0.5; the
digamma implementation shifts its argument to >= 6 by the recurrence
psi(x) = psi(x + 1) - 1/x and then applies a six-term asymptotic series.
Accuracy targets: |lgamma rel. error| < 1e-10 on (0, 1e6).
"""

from __future__ import annotations

import numpy as np

_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_TWO_PI = 0.9189385332046727  # 0.5 * ln(2 * pi)

# ln(e - 1): the pre-activation that softplus maps to exactly 1.
SOFTPLUS_INV_ONE = 0.5413248546129181


def softplus(x):
    """ln(1 + e^x), switching to the identity above 30 to avoid overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def softplus_inv(y):
    """Inverse of softplus; y must be positive."""
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


def gelu(x):
    """Gaussian-gated unit in its tanh form."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def _lgamma_core(z):
    # Lanczos, valid for z >= 0.5.
    zm1 = z - 1.0
    acc = np.full_like(zm1, _LANCZOS_COEF[0])
    for i, c in enumerate(_LANCZOS_COEF[1:], start=1):
        acc = acc + c / (zm1 + i)
    t = zm1 + _LANCZOS_G + 0.5
    return _HALF_LOG_TWO_PI + (zm1 + 0.5) * np.log(t) - t + np.log(acc)


def lgamma(x):
    """ln Gamma(x) for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0.0):
        raise ValueError("lgamma requires x > 0")
    out = np.empty_like(x)
    low = x < 0.5
    if np.any(low):
        xl = x[low]
        # Reflection: ln Gamma(x) = ln(pi / sin(pi x)) - ln Gamma(1 - x).
        out[low] = np.log(np.pi / np.sin(np.pi * xl)) - _lgamma_core(1.0 - xl)
    if np.any(~low):
        out[~low] = _lgamma_core(x[~low])
    return out


def digamma(x):
    """d/dx ln Gamma(x) for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0.0):
        raise ValueError("digamma requires x > 0")
    x = x.copy()
    acc = np.zeros_like(x)
    # Shift into the asymptotic regime; x > 0 needs at most six steps.
    for _ in range(6):
        low = x < 6.0
        if not np.any(low):
            break
        acc[low] -= 1.0 / x[low]
        x[low] += 1.0
    u = 1.0 / (x * x)
    series = u * (1.0 / 12.0 - u * (1.0 / 120.0 - u * (1.0 / 252.0 - u * (
        1.0 / 240.0 - u * (1.0 / 132.0 - u * (691.0 / 32760.0))))))
    return acc + np.log(x) - 0.5 / x - series
