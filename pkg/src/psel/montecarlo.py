"""Monte-Carlo experiments: PSMSE, selection bias and parameter sweeps.

Every replication draws the ML statistics, applies the selection rule and
evaluates all requested estimators on the same draw.  Replications are split
into equal batches.  Each batch has its own generator derived from
``(seed, sweep index, batch index)``, so results do not depend on the worker
count.  Standard errors are delete-one-batch jackknife estimates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._mc import DEFAULT_BATCHES, jackknife, resolve_workers, run_batches
from .bounds import biased_psi_crb, ml_bias_gradient, psi_crb, zeta_factor
from .errors import DimensionError, EstimatorFailureRate, InputError, NumericalError
from .estimators import ESTIMATORS, estimate_batch
from .model import Family, ModelSpec, check_theta, draw_noise, ml_from_noise
from .selection import SelectionRule, select_batch

FAILURE_LIMIT = 0.01


@dataclass(frozen=True)
class Sweep:
    """One swept axis: ``"N"`` or ``"theta_j"`` with a 1-based ``j``."""

    axis: str
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise InputError("sweep grid is empty")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise InputError("sweep grid must be strictly increasing")
        if self.axis == "N":
            if any(v != int(v) or v < 1 for v in vals):
                raise InputError("N sweep values must be integers >= 1")
        elif not (self.axis.startswith("theta_") and self.axis[6:].isdigit()
                  and int(self.axis[6:]) >= 1):
            raise InputError(f"unknown sweep axis {self.axis!r}")
        object.__setattr__(self, "values", vals)

    @property
    def theta_index(self) -> int | None:
        return None if self.axis == "N" else int(self.axis[6:]) - 1


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of a Monte-Carlo experiment.

    Attributes:
        model: Observation model (for an ``N`` sweep, the swept value
            replaces ``model.N``).
        theta_true: True parameter vector.
        rule: Selection rule.
        estimators: Registered estimator names.
        replications: Replications per sweep point.
        seed: Root seed.
        sweep: Optional swept axis.
        batches: Batches for standard errors.
        estimator_options: Per-estimator keyword options.
    """

    model: ModelSpec
    theta_true: tuple[float, ...]
    rule: SelectionRule
    estimators: tuple[str, ...]
    replications: int
    seed: int = 0
    sweep: Sweep | None = None
    batches: int = DEFAULT_BATCHES
    estimator_options: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "theta_true", tuple(float(v) for v in self.theta_true))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if int(self.replications) != self.replications or self.replications < 1:
            raise InputError("replications must be an integer >= 1")
        if self.batches < 2 or self.batches > self.replications:
            raise InputError("batches must lie in [2, replications]")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise InputError(f"unknown estimators {unknown}; choose from {sorted(ESTIMATORS)}")
        if len(set(self.estimators)) != len(self.estimators):
            raise InputError("duplicate estimator names")
        bad = set(self.estimator_options) - set(self.estimators)
        if bad:
            raise InputError(f"options given for estimators not in the list: {sorted(bad)}")
        self.rule.check(self.model)
        for model, theta in self.points():
            check_theta(model, theta)
        if self.sweep is not None and self.sweep.theta_index is not None \
                and self.sweep.theta_index >= self.model.M:
            raise DimensionError(f"sweep axis {self.sweep.axis} exceeds M={self.model.M}")

    def sweep_values(self) -> tuple[float, ...]:
        return (float("nan"),) if self.sweep is None else self.sweep.values

    def points(self) -> list[tuple[ModelSpec, np.ndarray]]:
        """(model, theta) at every sweep point."""
        base = np.asarray(self.theta_true, dtype=float)
        if self.sweep is None:
            return [(self.model, base)]
        out = []
        j = self.sweep.theta_index
        if j is not None and j >= self.model.M:
            raise DimensionError(f"sweep axis {self.sweep.axis} exceeds M={self.model.M}")
        for v in self.sweep.values:
            if j is None:
                out.append((self.model.with_N(int(v)), base))
            else:
                t = base.copy()
                t[j] = v
                out.append((self.model, t))
        return out


@dataclass(frozen=True)
class SummaryRow:
    """Statistics of one estimator at one sweep point.

    Bias matrices are indexed ``[j, m]``: component ``j`` given that ``m``
    was selected.  ``cond_bias`` is conditional on the selection;
    ``ind_bias`` is weighted by the selection indicator, so
    ``ind_bias[:, m] == freq[m] * cond_bias[:, m]``.
    """

    sweep_value: float
    estimator: str
    psmse: float
    psmse_se: float
    bias_sel: float
    bias_sel_se: float
    bias_unsel: float
    bias_unsel_se: float
    freq: np.ndarray
    freq_se: np.ndarray
    cmse: np.ndarray
    cmse_se: np.ndarray
    cond_bias: np.ndarray
    cond_bias_se: np.ndarray
    ind_bias: np.ndarray
    ind_bias_se: np.ndarray
    psi_crb: float
    biased_psi_crb: float
    n_used: int
    failures: int
    batch_sums: np.ndarray = field(repr=False, compare=False)


@dataclass(frozen=True)
class McSummary:
    config: ExperimentConfig
    rows: tuple[SummaryRow, ...]
    workers: int
    wall_time: float = field(compare=False)

    def row(self, estimator: str, sweep_index: int = 0) -> SummaryRow:
        n = len(self.config.estimators)
        r = self.rows[sweep_index * n + self.config.estimators.index(estimator)]
        assert r.estimator == estimator
        return r

    def psmse_difference(self, a: str, b: str, sweep_index: int = 0) -> tuple[float, float]:
        """Paired PSMSE difference ``a - b`` and its jackknife SE.

        Both estimators see the same draws, so the pairing removes most of
        the common noise.
        """
        ra, rb = self.row(a, sweep_index), self.row(b, sweep_index)
        sse = _layout(self.config.model.M)["sse"]
        cols = np.column_stack([ra.batch_sums[:, sse].sum(axis=1), ra.batch_sums[:, 0],
                                rb.batch_sums[:, sse].sum(axis=1), rb.batch_sums[:, 0]])
        est, se = jackknife(cols, transform=lambda v: v[..., 0] / v[..., 1] - v[..., 2] / v[..., 3])
        return float(est), float(se)


@dataclass(frozen=True)
class BiasSamples:
    """Per-replication estimates and selections for :func:`empirical_psi_bias`."""

    theta_hat: np.ndarray
    selected: np.ndarray
    theta_true: np.ndarray
    batches: int = DEFAULT_BATCHES


@dataclass(frozen=True)
class PsiBiasTable:
    """Indicator-weighted and conditional biases, indexed ``[j, m]``.

    Conditional entries for an index that was never selected are NaN
    (missing), not zero.
    """

    indicator: np.ndarray
    indicator_se: np.ndarray
    conditional: np.ndarray
    conditional_se: np.ndarray
    freq: np.ndarray
    counts: np.ndarray


def _layout(M):
    """Per-batch sum vector: [n_used, count_m (M), sse_m (M), err_jm (M*M)]."""
    return {
        "n": 0,
        "count": slice(1, 1 + M),
        "sse": slice(1 + M, 1 + 2 * M),
        "err": slice(1 + 2 * M, 1 + 2 * M + M * M),
        "size": 1 + 2 * M + M * M,
    }


def _accumulate(M, est, theta, sel, ok):
    lay = _layout(M)
    out = np.zeros(lay["size"])
    est, sel = est[ok], sel[ok]
    rows = np.arange(sel.size)
    err = est - theta
    out[lay["n"]] = sel.size
    out[lay["count"]] = np.bincount(sel, minlength=M)
    out[lay["sse"]] = np.bincount(sel, weights=err[rows, sel] ** 2, minlength=M)
    err_jm = np.zeros((M, M))
    for m in range(M):
        err_jm[:, m] = err[sel == m].sum(axis=0)
    out[lay["err"]] = err_jm.ravel()
    return out


def _stats_from_sums(M, sums):
    """Point estimates and jackknife SEs from per-batch sum vectors."""
    lay = _layout(M)
    n = sums[:, lay["n"]]
    count = sums[:, lay["count"]]
    sse = sums[:, lay["sse"]]
    err = sums[:, lay["err"]].reshape(-1, M, M)
    diag = np.arange(M)
    off = ~np.eye(M, dtype=bool)

    psmse, psmse_se = jackknife(sse.sum(axis=1), n)
    freq, freq_se = jackknife(count, n)
    cmse, cmse_se = jackknife(sse, count)
    cond, cond_se = jackknife(err, count[:, None, :])
    ind, ind_se = jackknife(err, n)
    bsel, bsel_se = jackknife(err[:, diag, diag].sum(axis=1), n)
    bun, bun_se = jackknife(err[:, off].sum(axis=1) / (M - 1), n)
    # Bins that were never hit are reported as missing.
    empty = count.sum(axis=0) == 0
    cmse[empty] = cmse_se[empty] = np.nan
    cond[:, empty] = cond_se[:, empty] = np.nan
    return dict(psmse=float(psmse), psmse_se=float(psmse_se), freq=freq, freq_se=freq_se,
                cmse=cmse, cmse_se=cmse_se, cond_bias=cond, cond_bias_se=cond_se,
                ind_bias=ind, ind_bias_se=ind_se, bias_sel=float(bsel),
                bias_sel_se=float(bsel_se), bias_unsel=float(bun), bias_unsel_se=float(bun_se),
                n_used=int(n.sum()))


def empirical_psi_bias(samples: BiasSamples) -> PsiBiasTable:
    """Both forms of the selection bias with batch standard errors.

    Raises:
        InputError: if there are no samples.
    """
    th = np.atleast_2d(np.asarray(samples.theta_hat, dtype=float))
    sel = np.asarray(samples.selected, dtype=int)
    truth = np.asarray(samples.theta_true, dtype=float)
    R, M = th.shape
    if R == 0:
        raise InputError("no samples")
    if sel.shape != (R,) or truth.shape != (M,):
        raise DimensionError("selected must have one entry per row and theta_true length M")
    B = min(samples.batches, R)
    if B < 2:
        raise InputError("at least two samples are needed for standard errors")
    sums = np.stack([_accumulate(M, th[i], truth, sel[i], np.ones(i.size, dtype=bool))
                     for i in np.array_split(np.arange(R), B)])
    st = _stats_from_sums(M, sums)
    counts = sums[:, _layout(M)["count"]].sum(axis=0)
    return PsiBiasTable(st["ind_bias"], st["ind_bias_se"], st["cond_bias"],
                        st["cond_bias_se"], st["freq"], counts.astype(int))


def _bound_columns(model: ModelSpec, rule: SelectionRule, theta: np.ndarray, estimator: str):
    try:
        crb = psi_crb(model, rule, theta, "closed").aggregate
    except NumericalError:
        return float("nan"), float("nan")
    biased = float("nan")
    if estimator == "ml":
        try:
            biased = biased_psi_crb(model, rule, theta, ml_bias_gradient(model, rule, theta))
        except NumericalError:
            pass
    return float(crb), float(biased)


def run_experiment(cfg: ExperimentConfig, workers: int | None = 1) -> McSummary:
    """Run every sweep point of ``cfg`` and summarize each estimator.

    Raises:
        EstimatorFailureRate: when more than 1% of replications fail for an
            estimator at some sweep point.
    """
    start = time.perf_counter()
    nw = resolve_workers(workers)
    rows = []
    for i, ((model, theta), value) in enumerate(zip(cfg.points(), cfg.sweep_values())):
        M = model.M
        names = cfg.estimators

        def one(rng, n, b, model=model, theta=theta):
            stats = ml_from_noise(model, theta, draw_noise(model, rng, n))
            sel = select_batch(cfg.rule, stats, rng)
            out = np.zeros((len(names), _layout(M)["size"] + 1))
            for e, name in enumerate(names):
                est, failed = estimate_batch(name, model, cfg.rule, stats, sel,
                                             cfg.estimator_options.get(name))
                failed = failed | ~np.all(np.isfinite(est), axis=1)
                out[e, :-1] = _accumulate(M, est, theta, sel, ~failed)
                out[e, -1] = np.count_nonzero(failed)
            return out

        per_batch = np.stack(run_batches(one, seed=cfg.seed, key=(i,),
                                         replications=cfg.replications,
                                         batches=cfg.batches, workers=nw))
        for e, name in enumerate(names):
            sums = per_batch[:, e, :-1]
            failures = int(per_batch[:, e, -1].sum())
            if failures > FAILURE_LIMIT * cfg.replications:
                raise EstimatorFailureRate(
                    f"estimator {name!r} failed on {failures} of {cfg.replications} "
                    f"replications at sweep value {value!r} (limit {FAILURE_LIMIT:.0%})")
            st = _stats_from_sums(M, sums)
            crb, biased = _bound_columns(model, cfg.rule, theta, name)
            rows.append(SummaryRow(sweep_value=float(value), estimator=name, psi_crb=crb,
                                   biased_psi_crb=biased, failures=failures,
                                   batch_sums=sums, **st))
    return McSummary(cfg, tuple(rows), nw, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

PRESET_ALIASES = {
    "fig3": "fig3_uniform",
    "fig4": "fig4_zeta_surface",
    "fig56": "fig56_gaussian",
    "fig78": "fig78_exponential",
}
PRESETS = tuple(PRESET_ALIASES.values())


@dataclass(frozen=True)
class ZetaTable:
    """Correction factor over a (Delta, sigma_1^2) grid with fixed sigma_2^2."""

    deltas: np.ndarray
    sigma1_sq: np.ndarray
    sigma2_sq: float
    N: int
    kappa: np.ndarray
    zeta: np.ndarray  # shape (len(sigma1_sq), len(deltas))


def zeta_surface(deltas: Sequence[float], sigma1_sq: Sequence[float], sigma2_sq: float = 1.0,
                 N: int = 10) -> ZetaTable:
    """Tabulate the correction factor of population 1 with ``kappa = s1/(s1+s2)``.

    ``N`` does not enter the factor once ``Delta`` is given; it is recorded
    for the table header only.
    """
    d = np.asarray(deltas, dtype=float)
    s1 = np.asarray(sigma1_sq, dtype=float)
    if np.any(s1 <= 0) or sigma2_sq <= 0:
        raise InputError("variances must be > 0")
    kappa = s1 / (s1 + sigma2_sq)
    z = np.stack([zeta_factor(d, k) for k in kappa])
    return ZetaTable(d, s1, float(sigma2_sq), int(N), kappa, z)


def preset_config(name: str) -> ExperimentConfig:
    """Experiment definition for a simulation preset."""
    key = PRESET_ALIASES.get(name, name)
    if key == "fig3_uniform":
        return ExperimentConfig(
            model=ModelSpec(Family.UNIFORM, 2, 1), theta_true=(10.0, 10.2),
            rule=SelectionRule.sms(), estimators=("ml", "mvu", "uv"),
            replications=250_000, seed=0, sweep=Sweep("N", tuple(range(1, 11))))
    if key == "fig56_gaussian":
        return ExperimentConfig(
            model=ModelSpec(Family.GAUSSIAN, 2, 1, (1.0, 0.1)), theta_true=(0.0, 0.1),
            rule=SelectionRule.sms(), estimators=("ml", "psml_nr", "mbp"),
            replications=20_000, seed=0, sweep=Sweep("N", (1, 2, 5, 10, 20, 50, 100)),
            estimator_options={"psml_nr": {"max_iterations": 1}, "mbp": {"max_iterations": 1}})
    if key == "fig78_exponential":
        return ExperimentConfig(
            model=ModelSpec(Family.EXPONENTIAL, 2, 1), theta_true=(5.0, 5.0),
            rule=SelectionRule.sms(), estimators=("ml", "psml"),
            replications=100_000, seed=0, sweep=Sweep("theta_2", tuple(range(1, 10))))
    if key == "fig4_zeta_surface":
        raise InputError("fig4_zeta_surface is a pure table; use run_preset")
    raise InputError(f"unknown preset {name!r}; choose from {sorted(PRESET_ALIASES)}")


def run_preset(name: str, overrides: dict | None = None, fast: bool = False,
               workers: int | None = 1):
    """Run a named preset.

    Args:
        overrides: ``seed`` and/or ``replications`` replacing the defaults.
        fast: Divide the replication count by 10.

    Returns:
        :class:`McSummary` for simulation presets, :class:`ZetaTable` for the
        correction-factor surface.
    """
    key = PRESET_ALIASES.get(name, name)
    if key == "fig4_zeta_surface":
        return zeta_surface(np.linspace(-5.0, 5.0, 41), (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0))
    cfg = preset_config(key)
    ov = dict(overrides or {})
    unknown = set(ov) - {"seed", "replications"}
    if unknown:
        raise InputError(f"unsupported preset overrides {sorted(unknown)}")
    reps = int(ov.get("replications", cfg.replications))
    if fast:
        reps = max(reps // 10, cfg.batches)
    cfg = replace(cfg, replications=reps, seed=int(ov.get("seed", cfg.seed)))
    return run_experiment(cfg, workers=workers)
