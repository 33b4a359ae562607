"""Selection rules, selection probabilities and derivatives of their logarithm.

Analytic derivatives exist for the sample-mean rule (SMS) on two Gaussian or
two exponential populations, and trivially for randomized rules whose
probabilities do not depend on theta.  Everything else goes through the
simulated finite-difference estimator
:func:`mc_grad_log_selection_probability`.

Indices are 0-based throughout the Python API.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import special

from . import _special
from ._mc import McOptions, jackknife, run_batches
from .errors import DimensionError, InputError, UnsupportedAnalytic, ZeroFrequency
from .model import Family, ModelSpec, ObservationSet, check_theta, draw_noise, ml_estimate, ml_from_noise


class RuleKind(str, Enum):
    SMS = "sms"
    RANDOMIZED = "randomized"


@dataclass(frozen=True)
class SelectionRule:
    """Rule that maps observations to a population index.

    ``SMS`` picks the largest sufficient statistic (ties go to the lowest
    index).  ``RANDOMIZED`` ignores the data and draws an index from
    ``weights``.
    """

    kind: RuleKind = RuleKind.SMS
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        try:
            kind = RuleKind(self.kind)
        except ValueError:
            raise InputError(f"unknown selection rule {self.kind!r}") from None
        object.__setattr__(self, "kind", kind)
        if kind is RuleKind.RANDOMIZED:
            if self.weights is None:
                raise InputError("randomized rule needs weights")
            w = tuple(float(v) for v in self.weights)
            if any(not np.isfinite(v) or v < 0 for v in w):
                raise InputError("randomized weights must be finite and >= 0")
            if abs(sum(w) - 1.0) > 1e-12:
                raise InputError(f"randomized weights sum to {sum(w)!r}, not 1")
            object.__setattr__(self, "weights", w)
        elif self.weights is not None:
            raise InputError("weights only apply to the randomized rule")

    @classmethod
    def sms(cls) -> "SelectionRule":
        return cls(RuleKind.SMS)

    @classmethod
    def randomized(cls, weights) -> "SelectionRule":
        return cls(RuleKind.RANDOMIZED, tuple(weights))

    def check(self, model: ModelSpec):
        if self.kind is RuleKind.RANDOMIZED and len(self.weights) != model.M:
            raise DimensionError(f"{len(self.weights)} weights for M={model.M}")


@dataclass(frozen=True)
class McEstimate:
    """Simulated probability with its jackknife standard error."""

    value: float
    se: float
    replications: int


@dataclass(frozen=True)
class McGradient:
    value: np.ndarray
    se: np.ndarray
    freq_plus: np.ndarray
    freq_minus: np.ndarray
    replications: int


@dataclass(frozen=True)
class GaussianSmsContext:
    """Standardized gap of population ``m`` over its rival, two Gaussian populations."""

    Delta_m: float
    sigma2: float

    @classmethod
    def from_theta(cls, model: ModelSpec, theta, m: int) -> "GaussianSmsContext":
        _require_pair(model, Family.GAUSSIAN)
        t = check_theta(model, theta)
        s2 = model.sigma2
        return cls(float((t[m] - t[1 - m]) / np.sqrt(s2)), s2)


@dataclass(frozen=True)
class ExponentialSmsContext:
    """Auxiliaries of the exponential SMS selection probability.

    ``f_q`` and ``h_q`` are the gradient auxiliaries and ``alpha_m`` the bias
    coefficient; ``alpha_m == -f_q`` holds identically.
    """

    q_m: float
    alpha_m: float
    f_q: float
    h_q: float

    @classmethod
    def from_theta(cls, model: ModelSpec, theta, m: int) -> "ExponentialSmsContext":
        _require_pair(model, Family.EXPONENTIAL)
        t = check_theta(model, theta)
        q = float(t[m] / (t[m] + t[1 - m]))
        s = float(_exp_s(model.N, np.array(q)))
        return cls(q, s / model.N, -s / model.N, float(exponential_h(model.N, q)))


def _require_pair(model: ModelSpec, family: Family):
    if model.family is not family or model.M != 2:
        raise UnsupportedAnalytic(
            f"analytic SMS formulas need two {family.value} populations")


def _check_index(model: ModelSpec, m) -> int:
    if int(m) != m or not 0 <= m < model.M:
        raise InputError(f"index {m!r} out of range for M={model.M}")
    return int(m)


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def select(rule: SelectionRule, model: ModelSpec, x: ObservationSet,
           rng: np.random.Generator | None = None) -> int:
    """Index chosen by ``rule`` for the observations ``x``."""
    rule.check(model)
    stat = ml_estimate(model, x)
    return int(select_batch(rule, stat[None, :], rng)[0])


def select_batch(rule: SelectionRule, stats: np.ndarray,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Vectorized :func:`select` over rows of sufficient statistics."""
    stats = np.atleast_2d(stats)
    if rule.kind is RuleKind.SMS:
        return np.argmax(stats, axis=1)
    if rng is None:
        raise InputError("the randomized rule needs a random generator")
    cdf = np.cumsum(rule.weights)
    u = rng.random(stats.shape[0])
    return np.minimum(np.searchsorted(cdf, u, side="right"), stats.shape[1] - 1)


# ---------------------------------------------------------------------------
# Analytic probabilities and derivatives
# ---------------------------------------------------------------------------

def c_factor(Delta):
    """Second derivative of log Phi; ``-r*Delta - r**2`` with ``r = phi/Phi``.

    Lies in (-1, 0] and stays accurate deep in the lower tail.
    """
    out = _special.c_factor(Delta)
    return float(out) if out.ndim == 0 else out


def _exp_log_p(N: int, q):
    """log P(select m) for exponential SMS as a function of q = theta_m/(theta_m+theta_k)."""
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        # Hypergeometric form of the regularized incomplete beta avoids
        # underflow for small q; the direct form is used above 1/2.
        lo = (N * (np.log(q) + np.log1p(-q)) - np.log(N) - special.betaln(N, N)
              + np.log(special.hyp2f1(2 * N, 1, N + 1, np.minimum(q, 0.5))))
        hi = np.log(special.betainc(N, N, q))
    return np.where(q < 0.5, lo, hi)


def _exp_L(N: int, q):
    """d log P / dq."""
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_dp = (N - 1) * (np.log(q) + np.log1p(-q)) - special.betaln(N, N)
        return np.exp(log_dp - _exp_log_p(N, q))


def _exp_s(N: int, q):
    q = np.asarray(q, dtype=float)
    return q * (1.0 - q) * _exp_L(N, q)


def exponential_h(N: int, q):
    """Auxiliary ``h(q)``: zero for N=1, else a ratio of incomplete beta functions."""
    q = np.asarray(q, dtype=float)
    if N == 1:
        return np.zeros_like(q)
    return special.betainc(N + 1, N - 1, q) / (q * special.betainc(N, N, q))


def exponential_selection_probability(N: int, q):
    """Negative-binomial form of the exponential SMS selection probability."""
    return np.exp(_exp_log_p(N, q))


def log_prob_derivatives(model: ModelSpec, rule: SelectionRule, theta, m):
    """log P(select m), its gradient and Hessian, vectorized over rows.

    Args:
        theta: Array of shape (M,) or (R, M).
        m: Selected index, scalar or shape (R,).

    Returns:
        Tuple ``(logp, grad, hess)`` with shapes (R,), (R, M), (R, M, M).
        Rows outside the parameter domain give NaN.

    Raises:
        UnsupportedAnalytic: when no closed form is available.
    """
    rule.check(model)
    t = np.atleast_2d(np.asarray(theta, dtype=float))
    R, M = t.shape
    if M != model.M:
        raise DimensionError(f"theta has {M} columns, model has M={model.M}")
    mm = np.broadcast_to(np.asarray(m, dtype=int), (R,))
    rows = np.arange(R)
    if rule.kind is RuleKind.RANDOMIZED:
        with np.errstate(divide="ignore"):
            logp = np.log(np.asarray(rule.weights))[mm]
        return logp, np.zeros((R, M)), np.zeros((R, M, M))
    if model.family is Family.UNIFORM:
        raise UnsupportedAnalytic("no analytic selection probability for the uniform family")
    if M != 2:
        raise UnsupportedAnalytic("analytic SMS derivatives are implemented for M=2")

    kk = 1 - mm
    tm, tk = t[rows, mm], t[rows, kk]
    sign = np.zeros((R, M))
    sign[rows, mm] = 1.0
    sign[rows, kk] = -1.0
    pattern = sign[:, :, None] * sign[:, None, :]
    if model.family is Family.GAUSSIAN:
        s2 = model.sigma2
        sig = np.sqrt(s2)
        d = (tm - tk) / sig
        logp = _special.log_norm_cdf(d)
        grad = (_special.inverse_mills(d) / sig)[:, None] * sign
        hess = (_special.c_factor(d) / s2)[:, None, None] * pattern
        return logp, grad, hess

    N = model.N
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where((tm > 0) & (tk > 0), tm / (tm + tk), np.nan)
        logp = _exp_log_p(N, q)
        L = _exp_L(N, q)
        s = q * (1.0 - q) * L
        ds = N * (1.0 - 2.0 * q) * L - q * (1.0 - q) * L**2
        u = np.zeros((R, M))
        u[rows, mm] = 1.0 / tm
        u[rows, kk] = -1.0 / tk
        grad = s[:, None] * u
        du = np.zeros((R, M, M))
        du[rows, mm, mm] = -1.0 / tm**2
        du[rows, kk, kk] = 1.0 / tk**2
        hess = (ds * q * (1.0 - q))[:, None, None] * u[:, :, None] * u[:, None, :] \
            + s[:, None, None] * du
    return logp, grad, hess


def selection_probability(rule: SelectionRule, model: ModelSpec, theta, m: int,
                          mc_opts: McOptions | None = None):
    """Probability that ``rule`` selects population ``m``.

    Returns a float when a closed form exists (Gaussian or exponential SMS with
    M=2, any randomized rule); otherwise a :class:`McEstimate`.
    """
    m = _check_index(model, m)
    t = check_theta(model, theta)
    try:
        logp, _, _ = log_prob_derivatives(model, rule, t, m)
        return float(np.exp(logp[0]))
    except UnsupportedAnalytic:
        pass
    opts = mc_opts or McOptions()

    def one(rng, n, b):
        stats = ml_from_noise(model, t, draw_noise(model, rng, n))
        return np.count_nonzero(select_batch(rule, stats, rng) == m), n

    res = run_batches(one, seed=opts.seed, key=(m,), replications=opts.replications,
                      batches=opts.batches, workers=opts.workers)
    hits = np.array([r[0] for r in res], dtype=float)
    ns = np.array([r[1] for r in res], dtype=float)
    est, se = jackknife(hits, ns)
    return McEstimate(float(est), float(se), opts.replications)


def grad_log_selection_probability(rule: SelectionRule, model: ModelSpec, theta, m: int) -> np.ndarray:
    m = _check_index(model, m)
    _, grad, _ = log_prob_derivatives(model, rule, check_theta(model, theta), m)
    return grad[0]


def hessian_log_selection_probability(rule: SelectionRule, model: ModelSpec, theta, m: int) -> np.ndarray:
    m = _check_index(model, m)
    _, _, hess = log_prob_derivatives(model, rule, check_theta(model, theta), m)
    return hess[0]


# ---------------------------------------------------------------------------
# Simulated finite differences
# ---------------------------------------------------------------------------

def default_fd_step(theta) -> np.ndarray:
    return 0.05 * (1.0 + np.abs(np.asarray(theta, dtype=float)))


def mc_grad_log_selection_probability(rule: SelectionRule, model: ModelSpec, theta, m: int,
                                      K: int = 100_000, step=None, seed: int = 0,
                                      batches: int = 32, workers: int | None = 1,
                                      stream: int = 0) -> McGradient:
    """Finite-difference estimate of grad log P(select m) from simulated frequencies.

    For each coordinate ``l`` the same ``K`` noise draws are mapped to
    ``theta +- step_l/2 * e_l`` (common random numbers), and the derivative is
    ``(log freq+ - log freq-) / step_l``.  Standard errors are jackknifed over
    batches.

    Args:
        K: Simulated datasets per coordinate.
        step: Scalar or per-coordinate step; defaults to ``0.05*(1+|theta_l|)``.
        stream: Extra key so repeated calls (e.g. solver iterations) use
            independent streams under the same seed.

    Raises:
        ZeroFrequency: if a perturbed frequency is zero.
    """
    rule.check(model)
    m = _check_index(model, m)
    t = check_theta(model, theta)
    if K < 1:
        raise InputError("K must be >= 1")
    h = default_fd_step(t) if step is None else np.broadcast_to(np.asarray(step, float), t.shape)
    if np.any(h <= 0):
        raise InputError("finite-difference step must be > 0")
    if model.family is not Family.GAUSSIAN and np.any(t - h / 2 <= 0):
        raise InputError("finite-difference step leaves the positive parameter domain")

    value = np.zeros(model.M)
    se = np.zeros(model.M)
    fp = np.zeros(model.M)
    fm = np.zeros(model.M)
    for l in range(model.M):
        tp, tmn = t.copy(), t.copy()
        tp[l] += h[l] / 2
        tmn[l] -= h[l] / 2

        def one(rng, n, b, tp=tp, tmn=tmn):
            noise = draw_noise(model, rng, n)
            u_state = rng.bit_generator.state
            hp = np.count_nonzero(select_batch(rule, ml_from_noise(model, tp, noise), rng) == m)
            rng.bit_generator.state = u_state  # same coin flips at both points
            hm = np.count_nonzero(select_batch(rule, ml_from_noise(model, tmn, noise), rng) == m)
            return hp, hm, n

        res = run_batches(one, seed=seed, key=(int(stream), m, l), replications=K,
                          batches=batches, workers=workers)
        counts = np.array([[r[0], r[1]] for r in res], dtype=float)
        ns = np.array([r[2] for r in res], dtype=float)
        tot = counts.sum(axis=0)
        if np.any(tot == 0):
            raise ZeroFrequency(
                f"selection frequency of index {m} is zero at a perturbed point "
                f"(coordinate {l}); increase K")
        est, err = jackknife(counts, ns,
                             transform=lambda v, hl=h[l]: (np.log(v[..., 0]) - np.log(v[..., 1])) / hl)
        value[l], se[l] = est, err
        fp[l], fm[l] = tot / ns.sum()
    return McGradient(value, se, fp, fm, int(K))
