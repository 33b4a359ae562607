"""Standard normal helpers that stay accurate deep in the lower tail."""

import numpy as np
from scipy import special

_SQRT2 = np.sqrt(2.0)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

# Below this point 1 + c(Delta) is taken from its asymptotic series; above it
# the erfcx form loses accuracy like |Delta|^4 * eps.
_SERIES_CUTOFF = -25.0
# 1 + c(-x) = sum_k a_k / x^(2k), k = 1..6
_TRUNCVAR_SERIES = (1.0, -6.0, 50.0, -518.0, 6354.0, -89782.0)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x - _LOG_SQRT_2PI)


def norm_cdf(x):
    return special.ndtr(np.asarray(x, dtype=float))


def log_norm_cdf(x):
    return special.log_ndtr(np.asarray(x, dtype=float))


def inverse_mills(x):
    """phi(x) / Phi(x), finite for every real x."""
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        # erfcx overflows to inf for large positive x, giving the correct 0.
        return _SQRT_2_OVER_PI / special.erfcx(-x / _SQRT2)


def truncated_variance(x):
    """Var(Z | Z < x) for standard normal Z, i.e. 1 + c(x)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    deep = x < _SERIES_CUTOFF
    xs = x[~deep]
    r = inverse_mills(xs)
    out[~deep] = 1.0 - r * (xs + r)
    if np.any(deep):
        inv2 = 1.0 / (x[deep] * x[deep])
        acc = np.zeros_like(inv2)
        for a in reversed(_TRUNCVAR_SERIES):
            acc = (acc + a) * inv2
        out[deep] = acc
    return out


def c_factor(x):
    """Second derivative of log Phi at x; lies in (-1, 0]."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    deep = x < _SERIES_CUTOFF
    xs = x[~deep]
    r = inverse_mills(xs)
    out[~deep] = -r * (xs + r)
    if np.any(deep):
        out[deep] = truncated_variance(x[deep]) - 1.0
    return out
