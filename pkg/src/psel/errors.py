"""Exception hierarchy.

Input problems derive from :class:`InputError` (CLI exit code 2); numerical
failures derive from :class:`NumericalError` (CLI exit code 3).
"""


class PselError(Exception):
    """Base class for every error raised by this package."""


class InputError(PselError, ValueError):
    """Malformed configuration, data or arguments."""


class DimensionError(InputError):
    """Observation or parameter shape does not match the model."""


class NumericalError(PselError, ArithmeticError):
    """A computation could not produce a finite, trustworthy result."""


class NonRegularFamily(NumericalError):
    def __init__(self, family="uniform"):
        super().__init__(
            f"non-regular family '{family}': likelihood is not differentiable "
            "in theta, so scores, Fisher information and the bounds do not exist"
        )


class UnsupportedAnalytic(NumericalError):
    """No analytic selection-probability derivative for this rule/model."""


class UnsupportedClosedForm(NumericalError):
    """No closed-form PSFIM for this rule/model."""


class SingularPsfim(NumericalError):
    """Post-selection Fisher information is singular or ill-conditioned."""


class SingularHessian(NumericalError):
    """Post-selection Hessian could not be inverted."""


class ZeroFrequency(NumericalError):
    """A simulated selection frequency is zero; increase the replications."""


class NonConvergence(NumericalError):
    """An iterative solver did not meet its tolerance."""


class InformationDominanceViolated(NonConvergence):
    """Maximization-by-parts iterates diverged or left the parameter space."""


class DegenerateInput(NumericalError):
    """Input lies on the measure-zero set where a closed form is undefined."""


class FixedPointNotBracketed(NumericalError):
    """No sign change of the fixed-point equation was found."""


class EstimatorFailureRate(NumericalError):
    """Too many replications failed inside a Monte-Carlo experiment."""
