"""Monte-Carlo harness: accumulation, standard errors, determinism and presets."""

import dataclasses
import math

import numpy as np
import pytest
from scipy import integrate

from psel import (BiasSamples, DimensionError, EstimatorFailureRate, ExperimentConfig, InputError,
                  McOptions, ModelSpec, SelectionRule, Sweep, analytic_conditional_bias,
                  empirical_psi_bias, run_experiment, run_preset, zeta_factor)
from psel._mc import batch_sizes, jackknife, run_batches
from psel.montecarlo import ZetaTable, preset_config


def gauss_cfg(**kw):
    base = dict(model=ModelSpec("gaussian", 2, 10, (1.0, 0.1)), theta_true=(0.0, 0.1),
                rule=SelectionRule.sms(), estimators=("ml",), replications=20_000, seed=0)
    base.update(kw)
    return ExperimentConfig(**base)


class TestBatching:
    def test_sizes(self):
        assert batch_sizes(10, 3) == [4, 3, 3]
        assert sum(batch_sizes(100_001, 32)) == 100_001

    def test_run_batches_worker_independent(self):
        fn = lambda rng, n, b: rng.standard_normal(n).sum()
        a = run_batches(fn, seed=3, key=(1,), replications=1000, batches=8, workers=1)
        b = run_batches(fn, seed=3, key=(1,), replications=1000, batches=8, workers=4)
        assert a == b

    def test_jackknife_mean_se(self):
        # For a plain mean the jackknife SE equals the batch-means SE.
        rng = np.random.default_rng(0)
        x = rng.standard_normal(32)
        est, se = jackknife(x)
        assert est == pytest.approx(x.mean())
        assert se == pytest.approx(x.std(ddof=1) / math.sqrt(32))

    def test_options_validated(self):
        with pytest.raises(InputError):
            McOptions(replications=0)
        with pytest.raises(InputError):
            McOptions(batches=1)


class TestConfig:
    def test_sweep_validation(self):
        with pytest.raises(InputError):
            Sweep("N", ())
        with pytest.raises(InputError):
            Sweep("N", (3, 2))
        with pytest.raises(InputError):
            Sweep("N", (1.5,))
        with pytest.raises(InputError):
            Sweep("sigma", (1,))

    def test_config_validation(self):
        with pytest.raises(InputError):
            gauss_cfg(replications=0)
        with pytest.raises(InputError):
            gauss_cfg(estimators=("nope",))
        with pytest.raises(InputError):
            gauss_cfg(estimators=("ml", "ml"))
        with pytest.raises(InputError):
            gauss_cfg(estimator_options={"mbp": {}})
        with pytest.raises(DimensionError):
            gauss_cfg(sweep=Sweep("theta_3", (1.0,)))
        with pytest.raises(InputError):
            gauss_cfg(model=ModelSpec("exponential", 2, 1), theta_true=(1.0, -1.0))

    def test_points(self):
        cfg = gauss_cfg(sweep=Sweep("theta_2", (0.5, 1.0)))
        pts = cfg.points()
        np.testing.assert_array_equal(pts[1][1], [0.0, 1.0])
        cfg = gauss_cfg(sweep=Sweep("N", (2, 4)))
        assert [p[0].N for p in cfg.points()] == [2, 4]


class TestRunExperiment:
    def test_symmetric_frequencies(self):
        cfg = gauss_cfg(model=ModelSpec("gaussian", 2, 3, (1.0, 1.0)), theta_true=(0.2, 0.2))
        r = run_experiment(cfg).row("ml")
        assert np.all(np.abs(r.freq - 0.5) < 3 * r.freq_se)
        assert r.freq.sum() == pytest.approx(1.0, abs=1e-15)

    def test_ml_bias_matches_analytic(self):
        cfg = gauss_cfg(replications=50_000)
        r = run_experiment(cfg).row("ml")
        B = analytic_conditional_bias(cfg.model, cfg.rule, cfg.theta_true)
        assert np.all(np.abs(r.cond_bias - B) < 3 * r.cond_bias_se)
        assert r.bias_sel > 3 * r.bias_sel_se

    def test_psmse_decomposition_exact(self):
        cfg = gauss_cfg(estimators=("ml", "psml_nr"), sweep=Sweep("N", (1, 5)))
        s = run_experiment(cfg)
        for row in s.rows:
            assert row.psmse == pytest.approx(float(np.sum(row.freq * row.cmse)), rel=1e-13)
            np.testing.assert_allclose(row.ind_bias, row.cond_bias * row.freq[None, :], rtol=1e-12)

    def test_bit_identical_across_workers(self):
        cfg = gauss_cfg(estimators=("ml", "mbp"), replications=5000)
        a = run_experiment(cfg, workers=1)
        b = run_experiment(cfg, workers=4)
        assert b.workers == 4
        for ra, rb in zip(a.rows, b.rows):
            for f in dataclasses.fields(ra):
                np.testing.assert_array_equal(getattr(ra, f.name), getattr(rb, f.name))

    def test_seed_changes_results(self):
        a = run_experiment(gauss_cfg(replications=2000, seed=1)).row("ml")
        b = run_experiment(gauss_cfg(replications=2000, seed=2)).row("ml")
        assert a.psmse != b.psmse

    def test_bound_columns(self):
        s = run_experiment(gauss_cfg(estimators=("ml", "psml_nr"), replications=2000))
        ml, ps = s.row("ml"), s.row("psml_nr")
        assert ml.psi_crb == ps.psi_crb > 0
        assert ml.biased_psi_crb > 0 and math.isnan(ps.biased_psi_crb)

    def test_uniform_has_no_bound(self):
        cfg = ExperimentConfig(model=ModelSpec("uniform", 2, 2), theta_true=(10.0, 10.2),
                               rule=SelectionRule.sms(), estimators=("ml", "uv"),
                               replications=2000)
        r = run_experiment(cfg).row("uv")
        assert math.isnan(r.psi_crb)

    def test_failure_rate_abort(self):
        # Below the existence threshold the exponential PSML equation has no root.
        cfg = ExperimentConfig(model=ModelSpec("exponential", 2, 3), theta_true=(1.0, 1.0),
                               rule=SelectionRule.sms(), estimators=("psml",), replications=2000)
        with pytest.raises(EstimatorFailureRate, match="psml"):
            run_experiment(cfg)

    def test_paired_difference(self):
        s = run_experiment(gauss_cfg(estimators=("ml", "mbp"), replications=20_000,
                                     estimator_options={"mbp": {"max_iterations": 1}}))
        d, se = s.psmse_difference("ml", "mbp")
        assert d == pytest.approx(s.row("ml").psmse - s.row("mbp").psmse, rel=1e-12)
        assert 0 < se < s.row("ml").psmse_se

    def test_batch_se_coverage(self):
        # Known-truth fixture: the 3-SE interval around the conditional-bias
        # estimate should cover the analytic value for nearly every seed.
        model = ModelSpec("gaussian", 2, 4, (1.0, 0.5))
        theta = (0.0, 0.2)
        B = analytic_conditional_bias(model, SelectionRule.sms(), theta)
        covered = 0
        for seed in range(100):
            cfg = ExperimentConfig(model=model, theta_true=theta, rule=SelectionRule.sms(),
                                   estimators=("ml",), replications=4000, seed=seed)
            r = run_experiment(cfg).row("ml")
            covered += abs(r.cond_bias[1, 1] - B[1, 1]) <= 3 * r.cond_bias_se[1, 1]
        assert covered >= 95


class TestUniformSingleSample:
    """With one sample per population, ML and U-V share the same PSMSE."""

    @staticmethod
    def exact_psmse(est, a, b):
        # y1 ~ U(0, a), y2 ~ U(0, b); the larger observation is selected.
        first = integrate.dblquad(lambda y2, y1: (est(y1, y2) - a) ** 2, 0, a, 0, lambda y1: y1,
                                  epsabs=1e-12, epsrel=1e-12)[0]
        second = integrate.dblquad(lambda y1, y2: (est(y2, y1) - b) ** 2, 0, b, 0,
                                   lambda y2: min(y2, a), epsabs=1e-12, epsrel=1e-12)[0]
        return (first + second) / (a * b)

    def test_exact_tie(self):
        ml = self.exact_psmse(lambda ym, yk: ym, 10.0, 10.2)
        uv = self.exact_psmse(lambda ym, yk: 2 * ym - yk, 10.0, 10.2)
        assert ml == pytest.approx(uv, abs=1e-9)

    def test_simulation_matches_quadrature(self):
        cfg = ExperimentConfig(model=ModelSpec("uniform", 2, 1), theta_true=(10.0, 10.2),
                               rule=SelectionRule.sms(), estimators=("ml", "uv"),
                               replications=100_000, seed=2)
        s = run_experiment(cfg)
        exact = self.exact_psmse(lambda ym, yk: ym, 10.0, 10.2)
        for name in ("ml", "uv"):
            r = s.row(name)
            assert abs(r.psmse - exact) <= 3 * r.psmse_se
        d, se = s.psmse_difference("ml", "uv")
        assert abs(d) <= 3 * se


class TestEmpiricalPsiBias:
    def test_forms_agree(self):
        rng = np.random.default_rng(0)
        th = rng.normal(size=(1000, 2))
        sel = np.argmax(th, axis=1)
        t = empirical_psi_bias(BiasSamples(th, sel, np.zeros(2)))
        np.testing.assert_allclose(t.indicator, t.conditional * t.freq[None, :], rtol=1e-12)
        assert t.counts.sum() == 1000

    def test_empty_bin_is_missing(self):
        th = np.ones((10, 2))
        t = empirical_psi_bias(BiasSamples(th, np.zeros(10, int), np.zeros(2)))
        assert np.all(np.isnan(t.conditional[:, 1]))
        np.testing.assert_array_equal(t.indicator[:, 1], 0.0)

    def test_randomized_ml_unbiased(self):
        model = ModelSpec("gaussian", 2, 3, (1.0, 2.0))
        cfg = ExperimentConfig(model=model, theta_true=(0.0, 0.1),
                               rule=SelectionRule.randomized([0.4, 0.6]), estimators=("ml",),
                               replications=40_000, seed=3)
        r = run_experiment(cfg).row("ml")
        assert np.all(np.abs(r.ind_bias) < 3 * r.ind_bias_se)

    def test_errors(self):
        with pytest.raises(InputError):
            empirical_psi_bias(BiasSamples(np.zeros((0, 2)), np.zeros(0, int), np.zeros(2)))
        with pytest.raises(DimensionError):
            empirical_psi_bias(BiasSamples(np.zeros((4, 2)), np.zeros(3, int), np.zeros(2)))


class TestPresets:
    def test_zeta_surface(self):
        t = run_preset("fig4")
        assert isinstance(t, ZetaTable)
        assert t.zeta.shape == (7, 41)
        assert t.N == 10 and t.sigma2_sq == 1.0
        assert t.zeta[3, 20] == pytest.approx(zeta_factor(0.0, 0.5))

    @pytest.mark.parametrize("name", ["fig3", "fig56", "fig78"])
    def test_preset_configs(self, name):
        cfg = preset_config(name)
        assert cfg.sweep is not None and cfg.replications in (250_000, 20_000, 100_000)

    def test_overrides_and_fast(self):
        s = run_preset("fig78", {"seed": 5, "replications": 3200}, fast=True)
        assert s.config.replications == 320 and s.config.seed == 5

    def test_unknown(self):
        with pytest.raises(InputError):
            run_preset("fig9")
        with pytest.raises(InputError):
            run_preset("fig78", {"workers": 3})
