"""Post-selection Fisher information and bounds."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from psel import (InputError, McOptions, ModelSpec, NonRegularFamily, PsfimMethod, SelectionRule,
                  SingularPsfim, UnsupportedAnalytic, UnsupportedClosedForm,
                  analytic_conditional_bias, biased_psi_crb, fim, ml_bias_gradient, psfim,
                  psfim_inverse_gaussian, psi_crb, psi_crb_exponential_n1, psi_crb_gaussian_closed,
                  run_experiment, ExperimentConfig, Sweep, zeta_factor)
from psel.model import draw_noise, ml_from_noise
from psel.selection import select_batch

PATTERN = np.array([[1.0, -1.0], [-1.0, 1.0]])
C0 = -2 / math.pi


def zeta_oracle(d, k):
    r = stats.norm.pdf(d) / stats.norm.cdf(d)
    c = -r * (d + r)
    return 1 - c / (c + 1) * k


class TestPsfim:
    def test_randomized_equals_fim(self):
        rule = SelectionRule.randomized([0.3, 0.7])
        for model, t in ((ModelSpec("exponential", 2, 3), [1.0, 2.0]),
                         (ModelSpec("gaussian", 2, 4, (1.0, 0.5)), [0.0, 1.0])):
            for m in range(2):
                np.testing.assert_array_equal(psfim(model, rule, t, m).J_m, fim(model, t))

    def test_gaussian_closed_at_tie(self, sms):
        model = ModelSpec("gaussian", 2, 10, (1.0, 1.0))
        J = psfim(model, sms, [0.2, 0.2], 0).J_m
        np.testing.assert_allclose(J, 10 * np.eye(2) + C0 / 0.2 * PATTERN, rtol=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(a=st.floats(-6, 6), b=st.floats(-6, 6), m=st.integers(0, 1), N=st.integers(1, 40),
           s1=st.floats(0.05, 5), s2=st.floats(0.05, 5))
    def test_property_closed_inverse(self, a, b, m, N, s1, s2):
        model = ModelSpec("gaussian", 2, N, (s1, s2))
        J = psfim(model, SelectionRule.sms(), [a, b], m).J_m
        inv = psfim_inverse_gaussian([a, b], [s1, s2], N, m)
        np.testing.assert_allclose(J @ inv, np.eye(2), atol=1e-10)
        np.testing.assert_allclose(J, J.T)
        assert np.all(np.linalg.eigvalsh(J) >= -1e-8 * np.linalg.norm(J))

    def test_inverse_limit_is_classical(self):
        inv = psfim_inverse_gaussian([40.0, 0.0], [1.0, 0.1], 10, 0)
        np.testing.assert_allclose(inv, np.diag([0.1, 0.01]), rtol=1e-14)

    def test_inverse_entry_is_scaled_marginal_bound(self, gauss_fig5):
        inv = psfim_inverse_gaussian([0.0, 0.1], [1.0, 0.1], 10, 1)
        d = 0.1 / math.sqrt(0.11)
        assert d == pytest.approx(0.30151, abs=1e-5)
        assert inv[1, 1] == pytest.approx(zeta_oracle(d, 0.1 / 1.1) * 0.1 / 10, rel=1e-12)

    @pytest.mark.parametrize("theta", [[1.0, 1.0], [0.6, 2.5], [3.0, 0.4]])
    @pytest.mark.parametrize("N", [1, 3])
    def test_exponential_closed_matches_simulation(self, sms, theta, N):
        # Equivalent PSFIM forms for the exponential family: all simulated forms
        # agree with the closed form within 3 MC standard errors.
        model = ModelSpec("exponential", 2, N)
        opts = McOptions(replications=400_000, seed=2)
        closed = psfim(model, sms, theta, 0).J_m
        for method in ("definition", "score", "hessian"):
            r = psfim(model, sms, theta, 0, method, opts)
            assert np.all(np.abs(r.J_m - closed) <= 3 * r.mc_standard_error + 1e-12), method
            assert 0 < r.acceptance_rate < 1

    def test_exponential_closed_diagonal_form(self, sms):
        # For the exponential family the closed PSFIM equals
        # diag(N (theta + 2 b) / theta^3) + Hessian of log P, with b the ML conditional bias.
        model = ModelSpec("exponential", 2, 4)
        t = np.array([1.3, 0.8])
        B = analytic_conditional_bias(model, sms, t)
        from psel import hessian_log_selection_probability
        for m in range(2):
            expect = (np.diag(model.N * (t + 2 * B[:, m]) / t**3)
                      + hessian_log_selection_probability(sms, model, t, m))
            np.testing.assert_allclose(psfim(model, sms, t, m).J_m, expect, rtol=1e-12)

    def test_errors(self, sms):
        with pytest.raises(NonRegularFamily):
            psfim(ModelSpec("uniform", 2, 2), sms, [1, 1], 0)
        with pytest.raises(UnsupportedClosedForm):
            psfim(ModelSpec("gaussian", 3, 2, (1, 1, 1)), sms, [0, 0, 0], 0)
        with pytest.raises(InputError):
            psfim(ModelSpec("exponential", 2, 2), sms, [1, 1], 5)
        with pytest.raises(SingularPsfim):
            # Deep in the tail the component information collapses to the
            # classical one only in one direction; the matrix is near singular.
            psfim(ModelSpec("gaussian", 2, 1, (1.0, 1.0)), sms, [0.0, 1e7], 0)

    def test_gaussian_mc_three_components(self, sms):
        # M=3 has no closed form; the simulated PSFIM is still symmetric PSD.
        model = ModelSpec("gaussian", 3, 2, (1.0, 0.5, 0.8))
        opts = McOptions(replications=60_000)
        r = psfim(model, sms, [0.0, 0.1, -0.2], 1, "score", opts)
        np.testing.assert_allclose(r.J_m, r.J_m.T)
        assert np.all(np.linalg.eigvalsh(r.J_m) > 0)
        with pytest.raises(UnsupportedAnalytic):
            psfim(model, sms, [0.0, 0.1, -0.2], 1, "hessian", opts)


class TestZeta:
    def test_tie_half(self):
        assert zeta_factor(0.0, 0.5) == pytest.approx(1 + (2 / math.pi) / (1 - 2 / math.pi) * 0.5,
                                                      rel=1e-14)
        assert zeta_factor(0.0, 0.5) == pytest.approx(1.87597, abs=1e-5)

    def test_limits(self):
        assert zeta_factor(40.0, 0.7) == 1.0
        np.testing.assert_array_equal(zeta_factor(np.linspace(-30, 30, 61), 0.0), 1.0)

    def test_kappa_range(self):
        with pytest.raises(InputError):
            zeta_factor(0.0, 1.5)

    def test_against_oracle(self):
        for d in (-6.0, -2.0, 0.3, 3.0):
            for k in (0.1, 0.5, 0.9):
                assert zeta_factor(d, k) == pytest.approx(zeta_oracle(d, k), rel=1e-10)

    def test_deep_tail_finite(self):
        z = zeta_factor(np.array([-1e3, -1e5]), 0.5)
        assert np.all(np.isfinite(z)) and np.all(z > 1)

    @settings(max_examples=100, deadline=None)
    @given(d1=st.floats(-30, 30), d2=st.floats(-30, 30), k=st.floats(0.01, 1))
    def test_property_monotone_in_delta(self, d1, d2, k):
        lo, hi = sorted((d1, d2))
        assert zeta_factor(lo, k) >= zeta_factor(hi, k) - 1e-12
        assert zeta_factor(lo, k) >= 1.0


class TestPsiCrb:
    def test_randomized_reduction(self):
        model = ModelSpec("gaussian", 2, 4, (1.0, 0.5))
        rule = SelectionRule.randomized([0.25, 0.75])
        rep = psi_crb(model, rule, [0.0, 1.0])
        Binv = np.linalg.inv(fim(model, [0.0, 1.0]))
        assert rep.aggregate == pytest.approx(0.25 * Binv[0, 0] + 0.75 * Binv[1, 1], rel=1e-14)

    def test_nuisance_case(self):
        model = ModelSpec("exponential", 2, 5)
        rep = psi_crb(model, SelectionRule.randomized([0.0, 1.0]), [2.0, 3.0])
        assert rep.aggregate == pytest.approx(9 / 5, rel=1e-14)

    def test_fig5_closed(self, sms, gauss_fig5):
        rep = psi_crb(gauss_fig5, sms, [0.0, 0.1])
        s = math.sqrt(0.11)
        d2 = 0.1 / s
        expect = (1.0 / 10 * stats.norm.cdf(-d2) * zeta_oracle(-d2, 1 / 1.1)
                  + 0.1 / 10 * stats.norm.cdf(d2) * zeta_oracle(d2, 0.1 / 1.1))
        assert rep.aggregate == pytest.approx(expect, rel=1e-10)
        direct = psi_crb_gaussian_closed([0.0, 0.1], (1.0, 0.1), 10)
        assert rep.aggregate == direct.aggregate
        np.testing.assert_array_equal(rep.component_bound, direct.component_bound)

    def test_generic_closed_path_agrees_with_gaussian_formula(self, sms, gauss_fig5):
        # Inverting the closed PSFIM numerically gives the same components.
        direct = psi_crb_gaussian_closed([0.0, 0.1], (1.0, 0.1), 10)
        for m in range(2):
            J = psfim(gauss_fig5, sms, [0.0, 0.1], m).J_m
            assert np.linalg.inv(J)[m, m] == pytest.approx(direct.component_bound[m], rel=1e-12)

    @pytest.mark.parametrize("method", ["definition", "score", "hessian"])
    def test_fig5_simulated(self, sms, gauss_fig5, method):
        closed = psi_crb(gauss_fig5, sms, [0.0, 0.1]).aggregate
        rep = psi_crb(gauss_fig5, sms, [0.0, 0.1], method, McOptions(replications=200_000, seed=1))
        # The Gaussian log-likelihood Hessian is constant, so the Hessian form
        # carries no simulation noise at all.
        assert abs(rep.aggregate - closed) <= 3 * rep.aggregate_se + 1e-12

    def test_symmetric_collapse(self):
        for N in (1, 7, 50):
            rep = psi_crb_gaussian_closed([0.3, 0.3], (2.0, 2.0), N)
            assert rep.aggregate == pytest.approx(2.0 / N * zeta_factor(0.0, 0.5), rel=1e-14)

    def test_large_n_limit(self):
        rep = psi_crb_gaussian_closed([0.0, 0.1], (1.0, 0.1), 1_000_000)
        assert rep.aggregate * 1_000_000 == pytest.approx(0.1, rel=1e-9)

    @settings(max_examples=80, deadline=None)
    @given(a=st.floats(-5, 5), b=st.floats(-5, 5), N=st.integers(1, 100),
           s1=st.floats(0.05, 5), s2=st.floats(0.05, 5))
    def test_property_aggregate_consistency(self, a, b, N, s1, s2):
        rep = psi_crb_gaussian_closed([a, b], (s1, s2), N)
        assert rep.aggregate == pytest.approx(float(np.sum(rep.pr_select * rep.component_bound)),
                                              rel=1e-12)
        assert np.all(rep.component_bound >= 0) and rep.aggregate >= 0
        # Each component bound is at least the classical marginal bound.
        assert np.all(rep.component_bound >= np.array([s1, s2]) / N * (1 - 1e-12))

    def test_exponential_n1(self):
        assert psi_crb_exponential_n1(5, 5) == pytest.approx(25)
        assert psi_crb_exponential_n1(5, 1) == pytest.approx(21)
        assert psi_crb_exponential_n1(2, 7) == psi_crb_exponential_n1(7, 2)
        with pytest.raises(InputError):
            psi_crb_exponential_n1(5, 5, N=2)
        with pytest.raises(InputError):
            psi_crb_exponential_n1(-1, 5)

    @pytest.mark.parametrize("theta", [(5.0, 5.0), (5.0, 1.0), (0.3, 2.0)])
    def test_exponential_generic_matches_n1_formula(self, sms, theta):
        rep = psi_crb(ModelSpec("exponential", 2, 1), sms, theta)
        assert rep.aggregate == pytest.approx(psi_crb_exponential_n1(*theta), rel=1e-12)

    def test_uniform_rejected(self, sms):
        with pytest.raises(NonRegularFamily, match="non-regular family"):
            psi_crb(ModelSpec("uniform", 2, 2), sms, [1, 2])


class TestBiasedBound:
    def test_zero_gradient_reduces(self, sms, gauss_fig5):
        b = biased_psi_crb(gauss_fig5, sms, [0.0, 0.1], lambda m: np.zeros(2))
        assert b == pytest.approx(psi_crb(gauss_fig5, sms, [0.0, 0.1]).aggregate, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(g=st.lists(st.floats(-10, 10), min_size=4, max_size=4))
    def test_property_nonnegative(self, g):
        model = ModelSpec("exponential", 2, 2)
        grads = np.array(g).reshape(2, 2)
        assert biased_psi_crb(model, SelectionRule.sms(), [1.0, 1.5], lambda m: grads[m]) >= 0

    def test_ml_gradient_against_finite_differences(self, sms, gauss_fig5):
        t = np.array([0.0, 0.1])
        prov = ml_bias_gradient(gauss_fig5, sms, t)
        for m in range(2):
            fd = np.zeros(2)
            for l in range(2):
                e = np.zeros(2)
                e[l] = 1e-6
                fd[l] = (analytic_conditional_bias(gauss_fig5, sms, t + e)[m, m]
                         - analytic_conditional_bias(gauss_fig5, sms, t - e)[m, m]) / 2e-6
            np.testing.assert_allclose(prov(m), fd, rtol=1e-6, atol=1e-9)

    def test_below_ml_psmse(self, sms):
        cfg = ExperimentConfig(model=ModelSpec("gaussian", 2, 1, (1.0, 0.1)), theta_true=(0.0, 0.1),
                               rule=sms, estimators=("ml",), replications=20_000, seed=4,
                               sweep=Sweep("N", (1, 5, 10, 20, 50)))
        s = run_experiment(cfg)
        for i in range(5):
            r = s.row("ml", i)
            assert r.biased_psi_crb < r.psmse


class TestAnalyticBias:
    def test_gaussian_tie(self, sms):
        B = analytic_conditional_bias(ModelSpec("gaussian", 2, 1, (1.0, 1.0)), sms, [0.0, 0.0])
        assert B[0, 0] == pytest.approx(2 / math.sqrt(2) / math.sqrt(2 * math.pi), rel=1e-14)
        assert B[0, 0] == pytest.approx(0.56419, abs=1e-5)
        assert B[1, 0] == pytest.approx(-B[0, 0])

    @settings(max_examples=100, deadline=None)
    @given(a=st.floats(-10, 10), b=st.floats(-10, 10), N=st.integers(1, 50))
    def test_property_gaussian_signs(self, a, b, N):
        B = analytic_conditional_bias(ModelSpec("gaussian", 2, N, (1.0, 0.1)),
                                      SelectionRule.sms(), [a, b])
        assert np.all(np.diag(B) >= 0)
        assert B[1, 0] <= 0 and B[0, 1] <= 0

    def test_exponential_half(self, sms):
        B = analytic_conditional_bias(ModelSpec("exponential", 2, 1), sms, [5.0, 5.0])
        assert B[0, 0] == pytest.approx(2.5)
        assert B[1, 0] == pytest.approx(-2.5)

    @pytest.mark.parametrize("model,theta", [
        (ModelSpec("exponential", 2, 3), np.array([1.0, 1.6])),
        (ModelSpec("gaussian", 2, 2, (1.0, 0.3)), np.array([0.0, 0.4])),
    ])
    def test_against_simulation(self, sms, model, theta):
        th = ml_from_noise(model, theta, draw_noise(model, np.random.default_rng(6), 400_000))
        sel = select_batch(sms, th)
        B = analytic_conditional_bias(model, sms, theta)
        for m in range(2):
            err = th[sel == m] - theta
            se = err.std(axis=0, ddof=1) / math.sqrt(err.shape[0])
            assert np.all(np.abs(err.mean(axis=0) - B[:, m]) < 3 * se)

    def test_randomized_zero(self):
        B = analytic_conditional_bias(ModelSpec("exponential", 2, 1),
                                      SelectionRule.randomized([0.5, 0.5]), [1, 2])
        np.testing.assert_array_equal(B, 0)

    def test_unsupported(self, sms):
        with pytest.raises(UnsupportedAnalytic):
            analytic_conditional_bias(ModelSpec("gaussian", 3, 1, (1, 1, 1)), sms, [0, 0, 0])
