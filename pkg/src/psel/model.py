"""Observation models, likelihood calculus, samplers and classical estimators.

Populations are independent and each holds ``N`` i.i.d. samples.  Three
families are supported:

* ``gaussian``: y_m[n] ~ N(theta_m, sigma_m^2) with known variances,
* ``exponential``: y_m[n] ~ Exp(mean=theta_m),
* ``uniform``: y_m[n] ~ U(0, theta_m].

Every regular-family quantity used by the post-selection machinery depends
on the data only through the per-population ML estimate, so the ``*_ml``
helpers below work on arrays of ML statistics with shape ``(R, M)``.  That
is what the Monte-Carlo code vectorizes over.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import DimensionError, InputError, NonRegularFamily

_LOG_2PI = np.log(2.0 * np.pi)


class Family(str, Enum):
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class ModelSpec:
    """A set of ``M`` independent populations with ``N`` samples each.

    Attributes:
        family: Distribution family shared by all populations.
        M: Number of populations (at least 2).
        N: Samples per population (at least 1).
        noise_variances: Per-population noise variances, Gaussian only.
    """

    family: Family
    M: int
    N: int
    noise_variances: tuple[float, ...] | None = None

    def __post_init__(self):
        try:
            fam = Family(self.family)
        except ValueError:
            raise InputError(f"unknown family {self.family!r}") from None
        object.__setattr__(self, "family", fam)
        if int(self.M) != self.M or self.M < 2:
            raise InputError(f"M must be an integer >= 2, got {self.M!r}")
        if int(self.N) != self.N or self.N < 1:
            raise InputError(f"N must be an integer >= 1, got {self.N!r}")
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "N", int(self.N))
        if fam is Family.GAUSSIAN:
            if self.noise_variances is None:
                raise InputError("gaussian model needs noise_variances")
            nv = tuple(float(v) for v in self.noise_variances)
            if len(nv) != self.M:
                raise DimensionError(
                    f"{len(nv)} noise variances given for M={self.M}")
            if not all(np.isfinite(v) and v > 0 for v in nv):
                raise InputError("noise variances must be finite and > 0")
            object.__setattr__(self, "noise_variances", nv)
        elif self.noise_variances is not None:
            raise InputError(f"noise_variances only apply to the gaussian family")

    @property
    def is_regular(self) -> bool:
        return self.family is not Family.UNIFORM

    @property
    def variances(self) -> np.ndarray:
        """Diagonal of the noise covariance (Gaussian only)."""
        if self.family is not Family.GAUSSIAN:
            raise InputError("variances are only defined for the gaussian family")
        return np.asarray(self.noise_variances, dtype=float)

    @property
    def sigma2(self) -> float:
        """Variance of the difference of the two sample means (Gaussian, M=2)."""
        if self.M != 2:
            raise DimensionError("sigma2 is defined for M=2 only")
        return float(self.variances.sum() / self.N)

    def with_N(self, N: int) -> "ModelSpec":
        return ModelSpec(self.family, self.M, N, self.noise_variances)

    def require_regular(self):
        if not self.is_regular:
            raise NonRegularFamily(self.family.value)


@dataclass(frozen=True)
class ObservationSet:
    """Per-population sample arrays. Arrays are made read-only on construction."""

    populations: tuple[np.ndarray, ...]
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self):
        pops = []
        for p in self.populations:
            a = np.array(p, dtype=float).reshape(-1)
            a.setflags(write=False)
            pops.append(a)
        object.__setattr__(self, "populations", tuple(pops))

    @classmethod
    def from_arrays(cls, *arrays: Sequence[float], seed: int | None = None):
        return cls(tuple(arrays), seed=seed)

    def __len__(self):
        return len(self.populations)


def check_theta(model: ModelSpec, theta) -> np.ndarray:
    """Validate ``theta`` against ``model`` and return it as a float array."""
    t = np.asarray(theta, dtype=float)
    if t.shape != (model.M,):
        raise DimensionError(f"theta has shape {t.shape}, expected ({model.M},)")
    if not np.all(np.isfinite(t)):
        raise InputError("theta must be finite")
    if model.family is not Family.GAUSSIAN and np.any(t <= 0):
        raise InputError(f"{model.family.value} parameters must be > 0")
    return t


def _check_obs(model: ModelSpec, x: ObservationSet) -> tuple[np.ndarray, ...]:
    if len(x.populations) != model.M:
        raise DimensionError(
            f"{len(x.populations)} populations given, model has M={model.M}")
    for j, p in enumerate(x.populations):
        if p.size == 0:
            raise InputError(f"population {j} is empty")
        if p.size != model.N:
            raise DimensionError(
                f"population {j} has {p.size} samples, model has N={model.N}")
    return x.populations


def log_likelihood(model: ModelSpec, x: ObservationSet, theta) -> float:
    """Joint log-density; ``-inf`` where the density vanishes."""
    pops = _check_obs(model, x)
    t = check_theta(model, theta)
    total = 0.0
    if model.family is Family.GAUSSIAN:
        for y, th, v in zip(pops, t, model.variances):
            total += -0.5 * y.size * (_LOG_2PI + np.log(v)) - 0.5 * np.sum((y - th) ** 2) / v
    elif model.family is Family.EXPONENTIAL:
        for y, th in zip(pops, t):
            if np.any(y < 0):
                return -np.inf
            total += -y.size * np.log(th) - np.sum(y) / th
    else:
        for y, th in zip(pops, t):
            if np.any(y < 0) or np.any(y > th):
                return -np.inf
            total += -y.size * np.log(th)
    return float(total)


def score(model: ModelSpec, x: ObservationSet, theta) -> np.ndarray:
    """Gradient of :func:`log_likelihood` in ``theta``."""
    model.require_regular()
    _check_obs(model, x)
    return score_ml(model, ml_estimate(model, x), check_theta(model, theta))


def hessian(model: ModelSpec, x: ObservationSet, theta) -> np.ndarray:
    """Second derivative of :func:`log_likelihood`; diagonal for independent populations."""
    model.require_regular()
    _check_obs(model, x)
    return np.diag(hessian_diag_ml(model, ml_estimate(model, x), check_theta(model, theta)))


def fim(model: ModelSpec, theta) -> np.ndarray:
    """Classical Fisher information matrix."""
    model.require_regular()
    return np.diag(fim_diag(model, check_theta(model, theta)))


def sample(model: ModelSpec, theta, rng: np.random.Generator) -> ObservationSet:
    """Draw one ObservationSet of ``N`` samples per population."""
    t = check_theta(model, theta)
    N = model.N
    if model.family is Family.GAUSSIAN:
        pops = [th + np.sqrt(v) * rng.standard_normal(N)
                for th, v in zip(t, model.variances)]
    elif model.family is Family.EXPONENTIAL:
        pops = [rng.exponential(th, N) for th in t]
    else:
        # 1 - U lies in (0, 1], so samples land in (0, theta].
        pops = [th * (1.0 - rng.random(N)) for th in t]
    return ObservationSet(tuple(pops))


def ml_estimate(model: ModelSpec, x: ObservationSet) -> np.ndarray:
    """Per-population ML estimate: sample max for uniform, sample mean otherwise."""
    pops = _check_obs(model, x)
    if model.family is Family.UNIFORM:
        return np.array([p.max() for p in pops])
    return np.array([p.mean() for p in pops])


def mvu_estimate_uniform(model: ModelSpec, x: ObservationSet) -> np.ndarray:
    if model.family is not Family.UNIFORM:
        raise InputError("the MVU estimator is defined for the uniform family only")
    return (model.N + 1) / model.N * ml_estimate(model, x)


# ---------------------------------------------------------------------------
# Vectorized helpers on ML statistics.  ``theta_hat`` has shape (..., M) and
# ``theta`` broadcasts against it.
# ---------------------------------------------------------------------------

def draw_noise(model: ModelSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    """Standardized noise from which ML statistics are built by :func:`ml_from_noise`.

    Reusing one noise array at several ``theta`` values gives common random
    numbers, which the finite-difference gradient estimator relies on.
    """
    shape = (size, model.M)
    if model.family is Family.GAUSSIAN:
        return rng.standard_normal(shape)
    if model.family is Family.EXPONENTIAL:
        return rng.standard_gamma(model.N, shape) / model.N
    return (1.0 - rng.random(shape)) ** (1.0 / model.N)


def ml_from_noise(model: ModelSpec, theta, noise: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if model.family is Family.GAUSSIAN:
        return theta + np.sqrt(model.variances / model.N) * noise
    return theta * noise


def sample_ml(model: ModelSpec, theta, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw ``size`` rows of the ML statistic directly from its sampling law."""
    return ml_from_noise(model, check_theta(model, theta), draw_noise(model, rng, size))


def loglik_ml(model: ModelSpec, theta_hat, theta) -> np.ndarray:
    """Log-likelihood up to a theta-free additive constant.

    Returns ``-inf`` outside the parameter domain (theta <= 0 for the
    positive families).
    """
    model.require_regular()
    th = np.asarray(theta_hat, dtype=float)
    t = np.asarray(theta, dtype=float)
    N = model.N
    if model.family is Family.GAUSSIAN:
        return -0.5 * N * np.sum((th - t) ** 2 / model.variances, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = -N * np.sum(np.log(t) + th / t, axis=-1)
    return np.where(np.all(t > 0, axis=-1), val, -np.inf)


def score_ml(model: ModelSpec, theta_hat, theta) -> np.ndarray:
    model.require_regular()
    th = np.asarray(theta_hat, dtype=float)
    t = np.asarray(theta, dtype=float)
    if model.family is Family.GAUSSIAN:
        return model.N * (th - t) / model.variances
    return model.N * (th - t) / t**2


def hessian_diag_ml(model: ModelSpec, theta_hat, theta) -> np.ndarray:
    model.require_regular()
    th = np.asarray(theta_hat, dtype=float)
    t = np.asarray(theta, dtype=float)
    if model.family is Family.GAUSSIAN:
        return np.broadcast_to(-model.N / model.variances, np.broadcast(th, t).shape).copy()
    return model.N * (t - 2.0 * th) / t**3


def fim_diag(model: ModelSpec, theta) -> np.ndarray:
    model.require_regular()
    t = np.asarray(theta, dtype=float)
    if model.family is Family.GAUSSIAN:
        return np.broadcast_to(model.N / model.variances, t.shape).copy()
    return model.N / t**2
