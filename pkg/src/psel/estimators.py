"""Post-selection estimators.

The post-selection ML (PSML) estimate maximizes the conditional likelihood
``log f(x; theta) - log P(select m; theta)`` for the realized index ``m``.
Solvers provided here:

* exhaustive grid search with coordinate refinement,
* Newton-Raphson on the conditional likelihood,
* post-selection Fisher scoring,
* maximization by parts (MBP) in three variants,
* IPSML, which replaces ``grad log P`` by a simulated finite difference.

Closed forms cover the exponential model and the U-V estimators.  All
iterative solvers start at the ML estimate and use objective backtracking.

The ``*_batch`` functions operate on rows of ML statistics and are what the
Monte-Carlo harness calls; the scalar functions wrap them for one dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .errors import (DegenerateInput, DimensionError, FixedPointNotBracketed,
                     InformationDominanceViolated, InputError, NonConvergence,
                     SingularHessian, UnsupportedAnalytic)
from .model import (Family, ModelSpec, ObservationSet, check_theta, fim_diag,
                    hessian_diag_ml, loglik_ml, ml_estimate, score_ml)
from .selection import (RuleKind, SelectionRule, _exp_s, log_prob_derivatives,
                        mc_grad_log_selection_probability, select)

INFO_DOMINANCE_FACTOR = 1e3
_MAX_HALVINGS = 60


class Method(str, Enum):
    ML = "ml"
    MVU = "mvu"
    UV = "uv"
    GRID = "psml_grid"
    NEWTON_RAPHSON = "psml_nr"
    FISHER_SCORING = "psml_fs"
    MBP_EXACT = "mbp"
    MBP_NEWTON = "mbp_newton"
    MBP_FISHER = "mbp_fisher"
    IPSML = "ipsml"
    EXPONENTIAL_CLOSED = "psml_exp_closed"


class MbpVariant(str, Enum):
    EXACT = "exact"
    NEWTON_RELAXED = "newton"
    FISHER_RELAXED = "fisher"


_MBP_METHOD = {MbpVariant.EXACT: Method.MBP_EXACT,
               MbpVariant.NEWTON_RELAXED: Method.MBP_NEWTON,
               MbpVariant.FISHER_RELAXED: Method.MBP_FISHER}


@dataclass(frozen=True)
class SolverConfig:
    """Iteration controls shared by the PSML solvers.

    Attributes:
        max_iterations: Upper bound on parameter updates.
        score_tolerance: Convergence threshold on the max-norm of the
            post-selection score.
        step_damping: Initial step fraction; halved while the objective drops.
        initializer: Starting point; ``None`` means the ML estimate.
    """

    max_iterations: int = 200
    score_tolerance: float = 1e-10
    step_damping: float = 1.0
    initializer: tuple[float, ...] | None = None

    def __post_init__(self):
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise InputError("max_iterations must be an integer >= 1")
        if not self.score_tolerance > 0:
            raise InputError("score_tolerance must be > 0")
        if not 0 < self.step_damping <= 1:
            raise InputError("step_damping must lie in (0, 1]")
        if self.initializer is not None:
            object.__setattr__(self, "initializer", tuple(float(v) for v in self.initializer))


@dataclass(frozen=True)
class EstimateResult:
    """Estimator output with solver diagnostics.

    ``converged`` implies ``final_score_norm <= score_tolerance`` except for
    IPSML, whose flag reports the statistical stopping rule and whose
    simulated score error is given in ``mc_standard_error``.
    """

    theta_hat: np.ndarray
    selected_m: int
    method: Method
    iterations: int = 0
    final_score_norm: float = 0.0
    converged: bool = True
    on_boundary: bool = False
    mc_standard_error: np.ndarray | None = field(default=None, compare=False)


# Row status codes of the batch solver.
OK, MAX_ITER, SINGULAR, DIVERGED, DOMAIN = 0, 1, 2, 3, 4
FAILED = (SINGULAR, DIVERGED, DOMAIN)


# ---------------------------------------------------------------------------
# Conditional likelihood pieces on rows of ML statistics
# ---------------------------------------------------------------------------

def _objective(model, rule, th, t, m):
    logp, _, _ = log_prob_derivatives(model, rule, t, m)
    val = loglik_ml(model, th, t) - logp
    return np.where(np.isfinite(val), val, -np.inf)


def psml_score_ml(model: ModelSpec, rule: SelectionRule, theta_hat, theta, m) -> np.ndarray:
    """Post-selection score ``score - grad log P`` on rows of ML statistics."""
    _, grad, _ = log_prob_derivatives(model, rule, theta, m)
    return score_ml(model, theta_hat, theta) - grad


def _psfim_rows(model, rule, t, m):
    """Closed-form PSFIM evaluated row by row."""
    _, grad, hess = log_prob_derivatives(model, rule, t, m)
    if rule.kind is RuleKind.RANDOMIZED or model.family is Family.GAUSSIAN:
        base = fim_diag(model, t)
    else:
        base = model.N / t**2 + 2.0 * grad / t
    J = hess.copy()
    idx = np.arange(model.M)
    J[:, idx, idx] += base
    return J


def _solve_rows(A, b):
    """Row-wise ``A x = b``; rows with singular ``A`` come back as NaN."""
    out = np.full(b.shape, np.nan)
    ok = np.ones(b.shape[0], dtype=bool)
    try:
        with np.errstate(all="ignore"):
            out = np.linalg.solve(A, b[..., None])[..., 0]
        cond = np.linalg.cond(A)
        ok = np.isfinite(cond) & (cond < 1e14) & np.all(np.isfinite(out), axis=1)
    except np.linalg.LinAlgError:
        for i in range(b.shape[0]):
            try:
                out[i] = np.linalg.solve(A[i], b[i])
                ok[i] = np.all(np.isfinite(out[i])) and np.linalg.cond(A[i]) < 1e14
            except np.linalg.LinAlgError:
                ok[i] = False
    return out, ok


def _mbp_exact_target(model, th, g):
    """Solve ``score(theta_hat, theta) = g`` for theta, row-wise."""
    N = model.N
    if model.family is Family.GAUSSIAN:
        return th - model.variances * g / N, np.ones(th.shape[0], dtype=bool)
    disc = N * N + 4.0 * g * N * th
    with np.errstate(invalid="ignore"):
        new = 2.0 * N * th / (N + np.sqrt(disc))
    return new, np.all(disc >= 0, axis=1)


def solve_batch(model: ModelSpec, rule: SelectionRule, theta_hat: np.ndarray, m,
                method: Method | str, cfg: SolverConfig | None = None, theta0=None):
    """Iterative PSML solvers vectorized over rows.

    Args:
        theta_hat: ML statistics, shape (R, M).
        m: Selected index per row.
        method: One of the Newton-Raphson, Fisher-scoring or MBP methods.
        theta0: Optional starting points (R, M); defaults to the ML rows or
            ``cfg.initializer``.

    Returns:
        ``(theta, iterations, score_norm, status)`` with one entry per row.
    """
    cfg = cfg or SolverConfig()
    method = Method(method)
    model.require_regular()
    th = np.atleast_2d(np.asarray(theta_hat, dtype=float))
    R = th.shape[0]
    mm = np.broadcast_to(np.asarray(m, dtype=int), (R,)).copy()
    if theta0 is not None:
        t = np.array(np.broadcast_to(theta0, th.shape), dtype=float)
    elif cfg.initializer is not None:
        t = np.tile(np.asarray(cfg.initializer, dtype=float), (R, 1))
    else:
        t = th.copy()
    norm0 = np.maximum(np.linalg.norm(t, axis=1), 1.0)
    iters = np.zeros(R, dtype=int)
    status = np.full(R, MAX_ITER)
    obj = _objective(model, rule, th, t, mm)
    status[~np.isfinite(obj)] = DOMAIN
    active = status == MAX_ITER
    tol = cfg.score_tolerance

    for _ in range(cfg.max_iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ti, hi, mi = t[idx], th[idx], mm[idx]
        s = psml_score_ml(model, rule, hi, ti, mi)
        done = np.max(np.abs(s), axis=1) <= tol
        status[idx[done]] = OK
        active[idx[done]] = False
        keep = ~done
        idx, ti, hi, mi, s = idx[keep], ti[keep], hi[keep], mi[keep], s[keep]
        if idx.size == 0:
            break

        ok = np.ones(idx.size, dtype=bool)
        if method is Method.NEWTON_RAPHSON:
            _, _, hp = log_prob_derivatives(model, rule, ti, mi)
            H = -hp
            d = np.arange(model.M)
            H[:, d, d] += hessian_diag_ml(model, hi, ti)
            step, ok = _solve_rows(-H, s)
            bad_status = SINGULAR
        elif method is Method.FISHER_SCORING:
            step, ok = _solve_rows(_psfim_rows(model, rule, ti, mi), s)
            bad_status = SINGULAR
        elif method is Method.MBP_EXACT:
            _, g, _ = log_prob_derivatives(model, rule, ti, mi)
            target, ok = _mbp_exact_target(model, hi, g)
            step = target - ti
            bad_status = DIVERGED
        elif method is Method.MBP_NEWTON:
            hd = hessian_diag_ml(model, hi, ti)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = s / -hd
            ok = np.all(np.isfinite(step) & (hd < 0), axis=1)
            bad_status = DIVERGED
        elif method is Method.MBP_FISHER:
            step = s / fim_diag(model, ti)
            bad_status = DIVERGED
        else:
            raise InputError(f"{method.value} is not an iterative solver")
        status[idx[~ok]] = bad_status
        active[idx[~ok]] = False
        idx, ti, hi, mi, step = idx[ok], ti[ok], hi[ok], mi[ok], step[ok]
        if idx.size == 0:
            continue

        # Backtracking: halve until the conditional likelihood does not drop
        # (up to rounding).
        cur = obj[idx]
        alpha = np.full(idx.size, cfg.step_damping)
        new = ti + alpha[:, None] * step
        new_obj = _objective(model, rule, hi, new, mi)
        slack = 1e-12 * (1.0 + np.abs(cur))
        for _ in range(_MAX_HALVINGS):
            worse = ~(new_obj >= cur - slack)
            if not np.any(worse):
                break
            alpha[worse] *= 0.5
            new[worse] = ti[worse] + alpha[worse, None] * step[worse]
            new_obj[worse] = _objective(model, rule, hi[worse], new[worse], mi[worse])
        stuck = ~(new_obj >= cur - slack)
        t[idx[~stuck]] = new[~stuck]
        obj[idx[~stuck]] = new_obj[~stuck]
        iters[idx[~stuck]] += 1
        # A row that cannot improve has stalled; it is reported as not converged.
        active[idx[stuck]] = False

        big = np.linalg.norm(t[idx], axis=1) > INFO_DOMINANCE_FACTOR * norm0[idx]
        if method in (Method.MBP_EXACT, Method.MBP_NEWTON, Method.MBP_FISHER):
            status[idx[big]] = DIVERGED
            active[idx[big]] = False

    s = psml_score_ml(model, rule, th, t, mm)
    norm = np.max(np.abs(s), axis=1)
    fine = (status == MAX_ITER) & (norm <= tol)
    status[fine] = OK
    return t, iters, norm, status


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------

def exponential_fixed_point_roots(N: int, rho: float) -> list[float]:
    """Roots in (0, 1) of the scalar PSML equation in ``q_m``.

    ``rho`` is the ratio of the selected to the unselected ML estimate.  A root
    exists when ``rho > (N+1)/N``.  The caller keeps the root with the
    largest conditional likelihood.
    """
    def G(q):
        f = -_exp_s(N, q) / N
        return q * (1.0 - f) - rho * (1.0 - q) * (1.0 + f)

    z = np.linspace(-14.0, 21.0, 1401)
    grid = 1.0 / (1.0 + np.exp(-z))
    grid = grid[(grid > 0) & (grid < 1)]
    vals = G(grid)
    ok = np.isfinite(vals)
    grid, vals = grid[ok], vals[ok]
    roots = []
    for i in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0):
        roots.append(optimize.brentq(G, grid[i], grid[i + 1], xtol=1e-15, rtol=1e-15,
                                     maxiter=200))
    roots += [q for q, v in zip(grid, vals) if v == 0]
    if not roots:
        raise FixedPointNotBracketed(
            f"no root of the exponential PSML equation for ratio {rho!r} and N={N}")
    return roots


def _exponential_closed_rows(N, th, m):
    """Exponential SMS PSML for rows; returns (theta, status)."""
    R = th.shape[0]
    rows = np.arange(R)
    k = 1 - m
    ym, yk = th[rows, m], th[rows, k]
    out = np.full((R, 2), np.nan)
    status = np.full(R, OK)
    if N == 1:
        den = ym - 2.0 * yk
        bad = den == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            out[rows, m] = ym - yk
            out[rows, k] = yk * (ym - yk) / den
        status[bad] = DOMAIN
        return out, status
    model = ModelSpec(Family.EXPONENTIAL, 2, N)
    rule = SelectionRule.sms()
    for i in range(R):
        try:
            roots = exponential_fixed_point_roots(N, ym[i] / yk[i])
        except FixedPointNotBracketed:
            status[i] = DOMAIN
            continue
        best, best_obj = None, -np.inf
        for q in roots:
            f = -float(_exp_s(N, q)) / N
            cand = np.empty(2)
            cand[m[i]] = ym[i] / (1.0 - f)
            cand[k[i]] = yk[i] / (1.0 + f)
            o = float(_objective(model, rule, th[i], cand, m[i])[0])
            if o > best_obj:
                best, best_obj = cand, o
        out[i] = best
    return out, status


def uv_batch(model: ModelSpec, theta_hat: np.ndarray) -> np.ndarray:
    """U-V estimator for each component, treating it as the selected one."""
    if model.M != 2:
        raise DimensionError("the U-V estimator is defined for M=2")
    th = np.atleast_2d(np.asarray(theta_hat, dtype=float))
    N = model.N
    other = th[:, ::-1]
    if model.family is Family.UNIFORM:
        mvu = (N + 1) / N * th
        return mvu - mvu[:, ::-1] ** N / mvu ** (N - 1) / (N + 1)
    if model.family is Family.EXPONENTIAL:
        return th - other**N / th ** (N - 1)
    raise InputError("the U-V estimator is defined for the uniform and exponential families")


# ---------------------------------------------------------------------------
# Scalar API
# ---------------------------------------------------------------------------

def _resolve_m(model, rule, x, m, rng):
    if m is not None:
        if int(m) != m or not 0 <= m < model.M:
            raise InputError(f"index {m!r} out of range for M={model.M}")
        return int(m)
    return select(rule, model, x, rng)


def psml_score(model: ModelSpec, rule: SelectionRule, x: ObservationSet, theta,
               m: int | None = None, rng=None) -> np.ndarray:
    """Gradient of the conditional log-likelihood at ``theta`` for ``m = Psi(x)``."""
    model.require_regular()
    m = _resolve_m(model, rule, x, m, rng)
    t = check_theta(model, theta)
    return psml_score_ml(model, rule, ml_estimate(model, x)[None], t[None], m)[0]


def _result(theta, m, method, iters, norm, status, tol, on_boundary=False):
    if status == SINGULAR:
        raise SingularHessian(f"{method.value}: system matrix is singular at iteration {iters}")
    if status == DIVERGED:
        raise InformationDominanceViolated(
            f"{method.value}: iterates diverged or left the domain after {iters} iterations")
    if status == DOMAIN:
        raise NonConvergence(f"{method.value}: iterate left the parameter domain")
    return EstimateResult(np.asarray(theta, dtype=float), m, method, int(iters), float(norm),
                          bool(norm <= tol), on_boundary)


def _iterative(model, rule, x, cfg, m, rng, method):
    model.require_regular()
    cfg = cfg or SolverConfig()
    m = _resolve_m(model, rule, x, m, rng)
    th = ml_estimate(model, x)
    theta, it, norm, st = solve_batch(model, rule, th[None], m, method, cfg)
    return _result(theta[0], m, method, it[0], norm[0], st[0], cfg.score_tolerance)


def psml_newton_raphson(model: ModelSpec, rule: SelectionRule, x: ObservationSet,
                        cfg: SolverConfig | None = None, m: int | None = None,
                        rng=None) -> EstimateResult:
    """Damped Newton-Raphson on the conditional log-likelihood.

    Raises:
        SingularHessian: if the post-selection Hessian cannot be inverted.
    """
    return _iterative(model, rule, x, cfg, m, rng, Method.NEWTON_RAPHSON)


def psml_fisher_scoring(model: ModelSpec, rule: SelectionRule, x: ObservationSet,
                        cfg: SolverConfig | None = None, m: int | None = None,
                        rng=None) -> EstimateResult:
    """Newton-type iteration with the PSFIM in place of the negative Hessian."""
    return _iterative(model, rule, x, cfg, m, rng, Method.FISHER_SCORING)


def psml_mbp(model: ModelSpec, rule: SelectionRule, x: ObservationSet,
             cfg: SolverConfig | None = None, variant: MbpVariant | str = MbpVariant.EXACT,
             m: int | None = None, rng=None) -> EstimateResult:
    """Maximization by parts.

    ``EXACT`` solves ``score(x; theta) = grad log P(theta_prev)`` in closed
    form; the relaxed variants take one Newton or Fisher step on the
    likelihood part only.  No second derivative of the selection
    probability is needed.

    Raises:
        InformationDominanceViolated: when the iterates run away from the
            start (norm beyond 1e3 times the initial norm) or the exact
            update has no real solution.
    """
    return _iterative(model, rule, x, cfg, m, rng, _MBP_METHOD[MbpVariant(variant)])


def psml_grid_search(model: ModelSpec, rule: SelectionRule, x: ObservationSet,
                     bounds: Sequence[tuple[float, float]], resolution: int = 201,
                     m: int | None = None, rng=None, max_sweeps: int = 2000) -> EstimateResult:
    """Maximize the conditional log-likelihood over a box.

    The grid maximizer is refined by cyclic one-dimensional root finding on
    the post-selection score until the point stops moving.
    """
    model.require_regular()
    m = _resolve_m(model, rule, x, m, rng)
    th = ml_estimate(model, x)
    bnd = np.asarray(bounds, dtype=float)
    if bnd.shape != (model.M, 2) or np.any(bnd[:, 0] >= bnd[:, 1]):
        raise InputError("bounds must be M increasing (low, high) pairs")
    if resolution < 3:
        raise InputError("resolution must be >= 3")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in bnd]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.M)
    obj = _objective(model, rule, th, mesh, m)
    t = mesh[int(np.argmax(obj))].copy()
    width = (bnd[:, 1] - bnd[:, 0]) / (resolution - 1)

    def partial(l, v, t):
        p = t.copy()
        p[l] = v
        return float(psml_score_ml(model, rule, th[None], p[None], m)[0, l])

    def objective_at(l, v, t):
        p = t.copy()
        p[l] = v
        return float(_objective(model, rule, th[None], p[None], m)[0])

    for _ in range(max_sweeps):
        prev = t.copy()
        for l in range(model.M):
            lo, hi = bnd[l]
            a, b = max(lo, t[l] - width[l]), min(hi, t[l] + width[l])
            fa, fb = partial(l, a, t), partial(l, b, t)
            grow = width[l]
            while fa < 0 and a > lo:
                grow *= 2
                a = max(lo, t[l] - grow)
                fa = partial(l, a, t)
            grow = width[l]
            while fb > 0 and b < hi:
                grow *= 2
                b = min(hi, t[l] + grow)
                fb = partial(l, b, t)
            if fa > 0 and fb < 0:
                t[l] = optimize.brentq(lambda v: partial(l, v, t), a, b, xtol=1e-15, rtol=1e-15)
            else:
                res = optimize.minimize_scalar(lambda v: -objective_at(l, v, t),
                                               bounds=(lo, hi), method="bounded",
                                               options={"xatol": 1e-12})
                # The bounded search never lands exactly on an edge; snap to
                # it when the edge is at least as good.
                cands = (res.x, lo, hi)
                t[l] = max(cands, key=lambda v: objective_at(l, v, t))
        if np.all(np.abs(t - prev) <= 1e-14 * (1.0 + np.abs(t))):
            break
    s = psml_score_ml(model, rule, th[None], t[None], m)[0]
    norm = float(np.max(np.abs(s)))
    edge = bool(np.any(np.isclose(t, bnd[:, 0], rtol=0, atol=1e-12 * (1 + np.abs(bnd[:, 0])))
                       | np.isclose(t, bnd[:, 1], rtol=0, atol=1e-12 * (1 + np.abs(bnd[:, 1])))))
    return EstimateResult(t, m, Method.GRID, 0, norm, norm <= SolverConfig().score_tolerance, edge)


def ipsml(model: ModelSpec, rule: SelectionRule, x: ObservationSet,
          cfg: SolverConfig | None = None, K: int = 100_000, fd_step=None, seed: int = 0,
          m: int | None = None, rng=None, variant: MbpVariant | str = MbpVariant.FISHER_RELAXED,
          min_iterations: int = 2, workers: int | None = 1) -> EstimateResult:
    """Relaxed PSML iteration with a simulated ``grad log P``.

    Each iteration draws fresh simulations for the finite-difference gradient.
    An update below ``cfg.score_tolerance`` ends the iteration at once. When
    every coordinate of the update first lies within one standard error of
    zero (after at least ``min_iterations`` updates, at iteration ``k0``), the
    iterate still lags the fixed point by roughly ``se / (1 - rate)``. The
    iteration therefore runs ``k0`` further burn-in updates and then returns the
    mean of the next ``max(k0, 10)`` iterates. ``mc_standard_error`` is the
    standard error of that mean, inflated for lag-1 autocorrelation.
    """
    model.require_regular()
    cfg = cfg or SolverConfig(max_iterations=200)
    variant = MbpVariant(variant)
    if variant is MbpVariant.EXACT:
        raise InputError("IPSML uses the Newton- or Fisher-relaxed update")
    m = _resolve_m(model, rule, x, m, rng)
    th = ml_estimate(model, x)
    t = th.copy() if cfg.initializer is None else check_theta(model, cfg.initializer)
    norm0 = max(np.linalg.norm(t), 1.0)
    it = 0
    resid, step_se = np.inf, None
    burn_end = avg_end = None
    tail: list[np.ndarray] = []
    for it in range(1, cfg.max_iterations + 1):
        G = mc_grad_log_selection_probability(rule, model, t, m, K=K, step=fd_step, seed=seed,
                                              stream=it, workers=workers)
        s = score_ml(model, th, t) - G.value
        resid = float(np.max(np.abs(s)))
        if variant is MbpVariant.FISHER_RELAXED:
            scale = 1.0 / fim_diag(model, t)
        else:
            hd = hessian_diag_ml(model, th, t)
            if np.any(hd >= 0):
                raise InformationDominanceViolated("likelihood Hessian is not negative definite")
            scale = -1.0 / hd
        step = scale * s
        step_se = scale * G.se
        new = t + cfg.step_damping * step
        if model.family is not Family.GAUSSIAN:
            a = cfg.step_damping
            while np.any(new <= 0) and a > 1e-12:
                a *= 0.5
                new = t + a * step
        t = new
        if np.linalg.norm(t) > INFO_DOMINANCE_FACTOR * norm0:
            raise InformationDominanceViolated("IPSML iterates diverged")
        if np.max(np.abs(step)) <= cfg.score_tolerance and not tail:
            return EstimateResult(t, m, Method.IPSML, it, resid, True, False, step_se)
        if burn_end is None:
            if it >= min_iterations and np.all(np.abs(step) <= step_se):
                burn_end = 2 * it
                avg_end = burn_end + max(it, 10)
        elif it > burn_end:
            tail.append(t.copy())
            if it >= avg_end:
                break
    if not tail:
        return EstimateResult(t, m, Method.IPSML, it, resid, False, False, step_se)
    arr = np.array(tail)
    se = _autocorrelated_mean_se(arr)
    return EstimateResult(arr.mean(axis=0), m, Method.IPSML, it, resid,
                          it >= (avg_end or 0), False, se)


def _autocorrelated_mean_se(arr: np.ndarray) -> np.ndarray:
    """Standard error of a column mean under an AR(1) approximation."""
    n = arr.shape[0]
    if n < 3:
        return np.full(arr.shape[1], np.nan)
    d = arr - arr.mean(axis=0)
    var = np.sum(d * d, axis=0) / (n - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.sum(d[1:] * d[:-1], axis=0) / np.sum(d * d, axis=0)
    rho = np.clip(np.nan_to_num(rho), 0.0, 0.95)
    return np.sqrt(var / n * (1 + rho) / (1 - rho))


def psml_exponential_closed(x: ObservationSet, m: int | None = None,
                            cfg: SolverConfig | None = None) -> EstimateResult:
    """PSML for SMS on two exponential populations.

    N=1 has an explicit solution.  For N >= 2 the conditional score equations
    reduce to one equation in ``q_m``, solved by bracketing; the result is
    polished by a few Newton steps when its score residual exceeds the
    tolerance.

    Raises:
        DegenerateInput: N=1 with ``y_m = 2 y_k``.
        FixedPointNotBracketed: N >= 2 and no root of the scalar equation.
    """
    cfg = cfg or SolverConfig()
    if len(x.populations) != 2:
        raise DimensionError("the exponential closed form needs two populations")
    N = x.populations[0].size
    model = ModelSpec(Family.EXPONENTIAL, 2, N)
    rule = SelectionRule.sms()
    m = _resolve_m(model, rule, x, m, None)
    th = ml_estimate(model, x)
    if np.any(th <= 0):
        raise InputError("exponential observations must be positive")
    out, st = _exponential_closed_rows(N, th[None], np.array([m]))
    if st[0] != OK:
        if N == 1:
            raise DegenerateInput("closed form is undefined when y_m = 2 y_k")
        raise FixedPointNotBracketed(
            f"no PSML root for ratio {th[m] / th[1 - m]!r} at N={N}")
    theta = out[0]
    norm = float(np.max(np.abs(psml_score_ml(model, rule, th[None], theta[None], m)[0])))
    it = 0
    if norm > cfg.score_tolerance and np.all(theta > 0):
        pol, its, pnorm, pst = solve_batch(model, rule, th[None], m, Method.NEWTON_RAPHSON,
                                           SolverConfig(max_iterations=5,
                                                        score_tolerance=cfg.score_tolerance),
                                           theta0=theta[None])
        if pst[0] in (OK, MAX_ITER) and pnorm[0] < norm:
            theta, norm, it = pol[0], float(pnorm[0]), int(its[0])
    return EstimateResult(theta, m, Method.EXPONENTIAL_CLOSED, it, norm,
                          norm <= cfg.score_tolerance)


def uv_estimate(model: ModelSpec, x: ObservationSet) -> np.ndarray:
    """U-V estimate of both components; component ``j`` treats ``j`` as selected."""
    return uv_batch(model, ml_estimate(model, x)[None])[0]


# ---------------------------------------------------------------------------
# Registry used by the Monte-Carlo harness and the CLI
# ---------------------------------------------------------------------------

BatchEstimator = Callable[[ModelSpec, SelectionRule, np.ndarray, np.ndarray, dict],
                          tuple[np.ndarray, np.ndarray]]


def _cfg_from(opts: dict) -> SolverConfig:
    allowed = {"max_iterations", "score_tolerance", "step_damping", "initializer"}
    unknown = set(opts) - allowed - {"bounds", "resolution"}
    if unknown:
        raise InputError(f"unknown estimator options {sorted(unknown)}")
    return SolverConfig(**{k: v for k, v in opts.items() if k in allowed})


def _batch_ml(model, rule, th, m, opts):
    return th.copy(), np.zeros(th.shape[0], dtype=bool)


def _batch_mvu(model, rule, th, m, opts):
    if model.family is not Family.UNIFORM:
        raise InputError("the MVU estimator is defined for the uniform family only")
    return (model.N + 1) / model.N * th, np.zeros(th.shape[0], dtype=bool)


def _batch_uv(model, rule, th, m, opts):
    return uv_batch(model, th), np.zeros(th.shape[0], dtype=bool)


def _batch_solver(method):
    def run(model, rule, th, m, opts):
        theta, _, _, st = solve_batch(model, rule, th, m, method, _cfg_from(opts))
        return theta, np.isin(st, FAILED)
    return run


def _batch_psml(model, rule, th, m, opts):
    if rule.kind is RuleKind.RANDOMIZED:
        return th.copy(), np.zeros(th.shape[0], dtype=bool)
    if model.family is Family.EXPONENTIAL and model.M == 2:
        theta, st = _exponential_closed_rows(model.N, th, m)
        return theta, st != OK
    return _batch_solver(Method.NEWTON_RAPHSON)(model, rule, th, m, opts)


def _batch_grid(model, rule, th, m, opts):
    if "bounds" not in opts:
        raise InputError("psml_grid needs a 'bounds' option")
    out = np.empty_like(th)
    fail = np.zeros(th.shape[0], dtype=bool)
    for i in range(th.shape[0]):
        # Only the ML statistic enters the conditional likelihood.
        x = ObservationSet(tuple(np.full(model.N, v) for v in th[i]))
        r = psml_grid_search(model, rule, x, opts["bounds"], opts.get("resolution", 101), m=m[i])
        out[i] = r.theta_hat
        fail[i] = r.on_boundary
    return out, fail


ESTIMATORS: dict[str, BatchEstimator] = {
    "ml": _batch_ml,
    "mvu": _batch_mvu,
    "uv": _batch_uv,
    "psml": _batch_psml,
    "psml_nr": _batch_solver(Method.NEWTON_RAPHSON),
    "psml_fs": _batch_solver(Method.FISHER_SCORING),
    "mbp": _batch_solver(Method.MBP_EXACT),
    "mbp_newton": _batch_solver(Method.MBP_NEWTON),
    "mbp_fisher": _batch_solver(Method.MBP_FISHER),
    "psml_grid": _batch_grid,
}


def estimate_batch(name: str, model: ModelSpec, rule: SelectionRule, theta_hat: np.ndarray,
                   m: np.ndarray, options: dict | None = None):
    """Apply registered estimator ``name`` to rows of ML statistics.

    Returns:
        ``(theta, failed)``: estimates (R, M) and a boolean failure mask.
    """
    try:
        fn = ESTIMATORS[name]
    except KeyError:
        raise InputError(f"unknown estimator {name!r}; choose from {sorted(ESTIMATORS)}") from None
    return fn(model, rule, np.atleast_2d(theta_hat), np.asarray(m), dict(options or {}))
