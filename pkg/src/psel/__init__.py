"""Estimating parameters of populations chosen by a data-driven rule.

Selection rules, post-selection Fisher information and Cramer-Rao-type
bounds, post-selection maximum-likelihood solvers, closed-form estimators and
a reproducible Monte-Carlo harness.
"""

__version__ = "0.1.0"

from ._mc import McOptions
from .bounds import (PsfimMethod, PsfimResult, PsiCrbReport, analytic_conditional_bias,
                     biased_psi_crb, ml_bias_gradient, psfim, psfim_inverse_gaussian, psi_crb,
                     psi_crb_exponential_n1, psi_crb_gaussian_closed, zeta_factor)
from .errors import (DegenerateInput, DimensionError, EstimatorFailureRate,
                     FixedPointNotBracketed, InformationDominanceViolated, InputError,
                     NonConvergence, NonRegularFamily, NumericalError, PselError, SingularHessian,
                     SingularPsfim, UnsupportedAnalytic, UnsupportedClosedForm, ZeroFrequency)
from .estimators import (EstimateResult, MbpVariant, Method, SolverConfig, ipsml, psml_exponential_closed,
                         psml_fisher_scoring, psml_grid_search, psml_mbp, psml_newton_raphson,
                         psml_score, uv_estimate)
from .model import (Family, ModelSpec, ObservationSet, fim, hessian, log_likelihood, ml_estimate,
                    mvu_estimate_uniform, sample, score)
from .montecarlo import (BiasSamples, ExperimentConfig, McSummary, PsiBiasTable, Sweep,
                         empirical_psi_bias, run_experiment, run_preset, zeta_surface)
from .selection import (ExponentialSmsContext, GaussianSmsContext, McEstimate, McGradient,
                        RuleKind, SelectionRule, c_factor, grad_log_selection_probability,
                        hessian_log_selection_probability, mc_grad_log_selection_probability,
                        select, selection_probability)
