"""Post-selection Fisher information and Cramer-Rao-type bounds on the PSMSE.

The post-selection Fisher information (PSFIM) of index ``m`` is the Fisher
information of the conditional likelihood ``f(x | select m; theta)``.  It can
be computed from

* the conditional covariance of the post-selection score (``DEFINITION``),
* the conditional second moment of the ordinary score minus the outer product
  of ``grad log P`` (``SCORE``),
* minus the conditional mean Hessian plus ``hess log P`` (``HESSIAN``),
* closed forms (``CLOSED``) for randomized rules and for SMS on two Gaussian
  or two exponential populations.

The three simulation methods use rejection sampling on the selection event
and report jackknife standard errors over batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from . import _special
from ._mc import McOptions, jackknife, run_batches
from .errors import (DimensionError, InputError, SingularPsfim, UnsupportedAnalytic,
                     UnsupportedClosedForm)
from .model import (Family, ModelSpec, check_theta, draw_noise, fim_diag, hessian_diag_ml,
                    ml_from_noise, score_ml)
from .selection import (McEstimate, RuleKind, SelectionRule, log_prob_derivatives,
                        select_batch, selection_probability)

COND_LIMIT = 1e12


class PsfimMethod(str, Enum):
    DEFINITION = "definition"
    SCORE = "score"
    HESSIAN = "hessian"
    CLOSED = "closed"


@dataclass(frozen=True)
class PsfimResult:
    """PSFIM of one selected index.

    Attributes:
        m: Selected index (0-based).
        J_m: The M x M information matrix.
        method: How it was computed.
        mc_standard_error: Per-entry jackknife SE, ``None`` for closed forms.
        acceptance_rate: Fraction of simulated datasets that selected ``m``.
    """

    m: int
    J_m: np.ndarray
    method: PsfimMethod
    mc_standard_error: np.ndarray | None = None
    acceptance_rate: float | None = None


@dataclass(frozen=True)
class PsiCrbReport:
    """Per-component and aggregate post-selection bounds.

    ``component_bound[m]`` is ``[J_m^{-1}]_{mm}`` and ``aggregate`` is
    ``sum_m pr_select[m] * component_bound[m]``.
    """

    pr_select: np.ndarray
    component_bound: np.ndarray
    aggregate: float
    theta: np.ndarray
    model: ModelSpec
    rule: SelectionRule
    method: PsfimMethod
    pr_se: np.ndarray | None = None
    component_se: np.ndarray | None = None
    aggregate_se: float | None = None


def _inv(J: np.ndarray) -> np.ndarray:
    if J.shape == (2, 2):
        det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        return np.array([[J[1, 1], -J[0, 1]], [-J[1, 0], J[0, 0]]]) / det
    return np.linalg.inv(J)


def _check_conditioning(J: np.ndarray):
    if not np.all(np.isfinite(J)):
        raise SingularPsfim("PSFIM has non-finite entries")
    cond = np.linalg.cond(J)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularPsfim(f"PSFIM condition number {cond:.3g} exceeds {COND_LIMIT:g}")


def _check_index(model: ModelSpec, m) -> int:
    if int(m) != m or not 0 <= m < model.M:
        raise InputError(f"index {m!r} out of range for M={model.M}")
    return int(m)


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------

def zeta_factor(Delta, kappa):
    """Correction factor ``1 - c/(c+1) * kappa`` of the Gaussian component bound."""
    d = np.asarray(Delta, dtype=float)
    k = np.asarray(kappa, dtype=float)
    if np.any((k < 0) | (k > 1)):
        raise InputError("kappa must lie in [0, 1]")
    # c + 1 is taken from the truncated variance directly so that the ratio
    # stays accurate when c approaches -1.
    out = 1.0 - _special.c_factor(d) / _special.truncated_variance(d) * k
    return float(out) if out.ndim == 0 else out


def psfim_inverse_gaussian(theta, sigma2s, N: int, m: int) -> np.ndarray:
    """Closed-form inverse PSFIM for SMS on two Gaussian populations."""
    t = np.asarray(theta, dtype=float)
    v = np.asarray(sigma2s, dtype=float)
    if t.shape != (2,) or v.shape != (2,):
        raise DimensionError("the Gaussian closed form needs M=2")
    s2 = v.sum() / N
    d = (t[m] - t[1 - m]) / np.sqrt(s2)
    c = float(_special.c_factor(d))
    one_plus_c = float(_special.truncated_variance(d))
    if one_plus_c <= 0:
        raise SingularPsfim(f"c(Delta) = -1 at Delta = {d!r}")
    D = np.array([[v[0] ** 2, -v[0] * v[1]], [-v[0] * v[1], v[1] ** 2]])
    return (np.diag(v) - c / (N * s2 * one_plus_c) * D) / N


def psi_crb_gaussian_closed(theta, sigma2s, N: int) -> PsiCrbReport:
    """Bound for SMS on two Gaussian populations from the correction factor."""
    t = np.asarray(theta, dtype=float)
    v = np.asarray(sigma2s, dtype=float)
    if t.shape != (2,) or v.shape != (2,):
        raise DimensionError("the Gaussian closed form needs M=2")
    model = ModelSpec(Family.GAUSSIAN, 2, N, tuple(v))
    sig = np.sqrt(model.sigma2)
    deltas = np.array([(t[0] - t[1]) / sig, (t[1] - t[0]) / sig])
    pr = _special.norm_cdf(deltas)
    kappa = v / v.sum()
    comp = v / N * np.array([zeta_factor(deltas[j], kappa[j]) for j in range(2)])
    return PsiCrbReport(pr, comp, float(np.sum(pr * comp)), t, model, SelectionRule.sms(),
                        PsfimMethod.CLOSED)


def psi_crb_exponential_n1(theta_m: float, theta_k: float, N: int = 1) -> float:
    """Aggregate bound for SMS on two exponential populations with one sample each."""
    if N != 1:
        raise InputError("this closed form holds for N=1 only")
    if theta_m <= 0 or theta_k <= 0:
        raise InputError("exponential parameters must be > 0")
    return (theta_m**3 + theta_k**3) / (theta_m + theta_k)


def analytic_conditional_bias(model: ModelSpec, rule: SelectionRule, theta) -> np.ndarray:
    """Conditional bias of the ML estimator given the selection.

    Returns:
        Matrix ``B`` with ``B[j, m] = E[theta_hat_j - theta_j | select m]``.

    Raises:
        UnsupportedAnalytic: for families or rules without a closed form.
    """
    t = check_theta(model, theta)
    rule.check(model)
    model.require_regular()
    if rule.kind is RuleKind.RANDOMIZED:
        # ML is unbiased for both regular families and the draw ignores the data.
        return np.zeros((model.M, model.M))
    if model.M != 2:
        raise UnsupportedAnalytic("analytic conditional bias needs M=2")
    B = np.zeros((2, 2))
    for m in range(2):
        k = 1 - m
        if model.family is Family.GAUSSIAN:
            sig = np.sqrt(model.sigma2)
            r = float(_special.inverse_mills((t[m] - t[k]) / sig))
            B[m, m] = model.variances[m] / (model.N * sig) * r
            B[k, m] = -model.variances[k] / (model.N * sig) * r
        else:
            _, grad, _ = log_prob_derivatives(model, rule, t, m)
            # E[score | m] = grad log P, and the exponential score is
            # N (theta_hat - theta) / theta^2.
            B[:, m] = t**2 / model.N * grad[0]
    return B


def ml_bias_gradient(model: ModelSpec, rule: SelectionRule, theta) -> Callable[[int], np.ndarray]:
    """Provider of ``grad_theta b_m`` for the ML estimator, for :func:`biased_psi_crb`."""
    t = check_theta(model, theta)
    if rule.kind is RuleKind.RANDOMIZED:
        return lambda m: np.zeros(model.M)
    if model.family is Family.GAUSSIAN and model.M == 2:
        def grad(m):
            k = 1 - m
            s2 = model.sigma2
            c = float(_special.c_factor((t[m] - t[k]) / np.sqrt(s2)))
            g = np.zeros(2)
            g[m] = model.variances[m] * c / (model.N * s2)
            g[k] = -g[m]
            return g
        return grad

    def grad_fd(m):
        g = np.zeros(model.M)
        for l in range(model.M):
            h = 1e-5 * (1.0 + abs(t[l]))
            e = np.zeros(model.M)
            e[l] = h
            g[l] = (analytic_conditional_bias(model, rule, t + e)[m, m]
                    - analytic_conditional_bias(model, rule, t - e)[m, m]) / (2 * h)
        return g
    analytic_conditional_bias(model, rule, t)  # fail early if unsupported
    return grad_fd


def _closed_psfim(model: ModelSpec, rule: SelectionRule, t: np.ndarray, m: int) -> np.ndarray:
    if rule.kind is RuleKind.RANDOMIZED:
        return np.diag(fim_diag(model, t))
    if model.M != 2:
        raise UnsupportedClosedForm("closed-form PSFIM needs M=2")
    _, _, hess = log_prob_derivatives(model, rule, t, m)
    if model.family is Family.GAUSSIAN:
        return model.N * np.diag(1.0 / model.variances) + hess[0]
    # Conditional mean of the exponential Hessian follows from the conditional
    # bias of theta_hat.
    b = analytic_conditional_bias(model, rule, t)[:, m]
    return np.diag(model.N * (t + 2.0 * b) / t**3) + hess[0]


# ---------------------------------------------------------------------------
# Simulation-based PSFIM
# ---------------------------------------------------------------------------

def _analytic_log_p(model, rule, t, m):
    try:
        _, g, h = log_prob_derivatives(model, rule, t, m)
        return g[0], h[0]
    except UnsupportedAnalytic:
        return None, None


def _psfim_batches(model, rule, t, m, method, opts):
    """Per-batch sums for the rejection-sampling PSFIM.

    Returns ``(num, den, to_J, accepted)`` where ``to_J`` maps pooled ratios
    ``num/den`` to the PSFIM.
    """
    M = model.M
    g, hlogp = _analytic_log_p(model, rule, t, m)
    if method is PsfimMethod.HESSIAN and hlogp is None:
        raise UnsupportedAnalytic(
            "the Hessian form needs an analytic Hessian of log P(select m)")

    def one(rng, n, b):
        stats = ml_from_noise(model, t, draw_noise(model, rng, n))
        keep = select_batch(rule, stats, rng) == m
        th = stats[keep]
        s = score_ml(model, th, t)
        out = np.zeros(M + M * M + M)
        out[:M] = s.sum(axis=0)
        if method is PsfimMethod.DEFINITION and g is not None:
            d = s - g
            out[M:M + M * M] = np.einsum("ri,rj->ij", d, d).ravel()
        else:
            out[M:M + M * M] = np.einsum("ri,rj->ij", s, s).ravel()
        out[M + M * M:] = hessian_diag_ml(model, th, t).sum(axis=0)
        return out, th.shape[0]

    res = run_batches(one, seed=opts.seed, key=(m,), replications=opts.replications,
                      batches=opts.batches, workers=opts.workers)
    num = np.stack([r[0] for r in res])
    den = np.array([r[1] for r in res], dtype=float)

    def to_J(ratio):
        mean_s = ratio[..., :M]
        second = ratio[..., M:M + M * M].reshape(ratio.shape[:-1] + (M, M))
        mean_h = ratio[..., M + M * M:]
        if method is PsfimMethod.HESSIAN:
            return -_diag_embed(mean_h) + hlogp
        if method is PsfimMethod.DEFINITION and g is not None:
            return second
        gg = mean_s if g is None else g
        return second - gg[..., :, None] * gg[..., None, :]

    return num, den, to_J, den.sum()


def _diag_embed(v):
    out = np.zeros(v.shape + (v.shape[-1],))
    idx = np.arange(v.shape[-1])
    out[..., idx, idx] = v
    return out


def _mc_psfim(model, rule, t, m, method, opts):
    num, den, to_J, acc = _psfim_batches(model, rule, t, m, method, opts)
    if acc < 2 or np.any(den == 0):
        raise SingularPsfim(
            f"too few simulated datasets select index {m}; increase the replications")
    J, se = jackknife(num, den, transform=to_J)
    J = 0.5 * (J + J.T)
    return J, se, float(acc / opts.replications), (num, den, to_J)


def psfim(model: ModelSpec, rule: SelectionRule, theta, m: int,
          method: PsfimMethod | str = PsfimMethod.CLOSED,
          mc_opts: McOptions | None = None) -> PsfimResult:
    """Post-selection Fisher information for selected index ``m``.

    Raises:
        NonRegularFamily: for the uniform family.
        UnsupportedClosedForm: ``CLOSED`` requested where none exists.
        SingularPsfim: condition number above 1e12.
    """
    model.require_regular()
    rule.check(model)
    method = PsfimMethod(method)
    m = _check_index(model, m)
    t = check_theta(model, theta)
    if method is PsfimMethod.CLOSED:
        J = _closed_psfim(model, rule, t, m)
        _check_conditioning(J)
        return PsfimResult(m, J, method)
    J, se, acc, _ = _mc_psfim(model, rule, t, m, method, mc_opts or McOptions())
    _check_conditioning(J)
    return PsfimResult(m, J, method, se, acc)


def psi_crb(model: ModelSpec, rule: SelectionRule, theta,
            method: PsfimMethod | str = PsfimMethod.CLOSED,
            mc_opts: McOptions | None = None) -> PsiCrbReport:
    """Component-wise and aggregate bounds ``sum_m P(select m) [J_m^{-1}]_{mm}``."""
    model.require_regular()
    rule.check(model)
    method = PsfimMethod(method)
    t = check_theta(model, theta)
    if (method is PsfimMethod.CLOSED and rule.kind is RuleKind.SMS
            and model.family is Family.GAUSSIAN and model.M == 2):
        return psi_crb_gaussian_closed(t, model.variances, model.N)

    opts = mc_opts or McOptions()
    M = model.M
    pr, pr_se = np.zeros(M), np.zeros(M)
    comp, comp_se = np.zeros(M), np.zeros(M)
    for m in range(M):
        p = selection_probability(rule, model, t, m, opts)
        if isinstance(p, McEstimate):
            pr[m], pr_se[m] = p.value, p.se
        else:
            pr[m] = p
        if pr[m] == 0:
            # Zero-probability indices do not contribute to the aggregate.
            comp[m] = np.nan
            continue
        if method is PsfimMethod.CLOSED:
            J = _closed_psfim(model, rule, t, m)
            _check_conditioning(J)
            comp[m] = _inv(J)[m, m]
        else:
            J, _, _, (num, den, to_J) = _mc_psfim(model, rule, t, m, method, opts)
            _check_conditioning(J)
            est, err = jackknife(num, den, transform=lambda r, m=m: _batched_inv_mm(to_J(r), m))
            comp[m], comp_se[m] = est, err
    used = pr > 0
    agg = float(np.sum(pr[used] * comp[used]))
    agg_se = float(np.sqrt(np.sum((pr[used] * comp_se[used]) ** 2
                                  + (comp[used] * pr_se[used]) ** 2)))
    mc = method is not PsfimMethod.CLOSED or np.any(pr_se > 0)
    return PsiCrbReport(pr, comp, agg, t, model, rule, method,
                        pr_se if mc else None, comp_se if mc else None, agg_se if mc else None)


def _batched_inv_mm(J, m):
    J = np.asarray(J)
    if J.ndim == 2:
        return _inv(J)[m, m]
    return np.array([_inv(Ji)[m, m] for Ji in J])


def biased_psi_crb(model: ModelSpec, rule: SelectionRule, theta,
                   bias_gradient_provider: Callable[[int], np.ndarray],
                   method: PsfimMethod | str = PsfimMethod.CLOSED,
                   mc_opts: McOptions | None = None) -> float:
    """Bound for estimators with conditional bias ``b_m(theta)``.

    Args:
        bias_gradient_provider: Maps ``m`` to ``grad_theta b_m(theta)``; the
            unit vector ``e_m`` is added here.

    Returns:
        ``sum_m P_m (grad b_m + e_m)^T J_m^{-1} (grad b_m + e_m)``.
    """
    model.require_regular()
    method = PsfimMethod(method)
    t = check_theta(model, theta)
    opts = mc_opts or McOptions()
    total = 0.0
    for m in range(model.M):
        p = selection_probability(rule, model, t, m, opts)
        p = p.value if isinstance(p, McEstimate) else p
        if p == 0:
            continue
        if method is PsfimMethod.CLOSED:
            J = _closed_psfim(model, rule, t, m)
        else:
            J = _mc_psfim(model, rule, t, m, method, opts)[0]
        _check_conditioning(J)
        a = np.asarray(bias_gradient_provider(m), dtype=float).copy()
        if a.shape != (model.M,):
            raise DimensionError("bias gradient must have length M")
        a[m] += 1.0
        total += p * float(a @ np.linalg.solve(J, a))
    return total
