"""Linear demand environment, revenue objective and instance-level constants.

Demand in round t of epoch i is ``<alpha, x> + p <beta, x> + noise``; the
parameter vector is stacked as ``theta = [alpha; beta]`` and the regressor as
``m = (x, p x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "InstanceConfigError",
    "DegenerateConstantsError",
    "PriceBounds",
    "DemandParams",
    "UniformBoxFeatures",
    "ConstantFeatures",
    "EpochInstance",
    "MetaInstance",
    "DerivedConstants",
    "make_design_vector",
    "expected_demand",
    "realize_demand",
    "optimal_price",
    "revenue",
    "compute_c0",
    "compute_derived_constants",
    "estimate_lambda0",
]


class InstanceConfigError(ValueError):
    """Raised when an instance or its inputs are malformed."""


class DegenerateConstantsError(InstanceConfigError):
    """Raised when p_min == p_max makes the meta-learning constants vanish."""


@dataclass(frozen=True)
class PriceBounds:
    p_min: float
    p_max: float

    def __post_init__(self):
        if not (0.0 < self.p_min <= self.p_max < math.inf):
            raise InstanceConfigError(
                f"price bounds must satisfy 0 < p_min <= p_max < inf, got "
                f"[{self.p_min}, {self.p_max}]"
            )

    @property
    def degenerate(self) -> bool:
        return self.p_min == self.p_max

    def contains(self, p: float) -> bool:
        return self.p_min <= p <= self.p_max


@dataclass(frozen=True)
class DemandParams:
    """Demand coefficients of one epoch; ``theta`` is ``[alpha; beta]``."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if alpha.shape != beta.shape or alpha.size == 0:
            raise InstanceConfigError(
                f"alpha and beta must be nonempty and equal length, got "
                f"{alpha.size} and {beta.size}"
            )
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise InstanceConfigError("demand parameters must be finite")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def from_theta(cls, theta) -> "DemandParams":
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size % 2:
            raise InstanceConfigError(f"theta must have even length, got {theta.size}")
        d = theta.size // 2
        return cls(theta[:d], theta[d:])

    @property
    def dim(self) -> int:
        return self.alpha.size

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])


def _as_theta(theta) -> np.ndarray:
    if isinstance(theta, DemandParams):
        return theta.theta
    return np.asarray(theta, dtype=float).reshape(-1)


def make_design_vector(x, p: float, dim: int | None = None) -> np.ndarray:
    """Stack ``(x, p x)``; ``dim`` optionally pins the feature length."""
    x = np.asarray(x, dtype=float)
    if x.ndim > 1:
        raise InstanceConfigError(f"feature vector must be one-dimensional, got shape {x.shape}")
    x = x.reshape(-1)
    if dim is not None and x.size != dim:
        raise InstanceConfigError(f"dimension mismatch: expected {dim} features, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise InstanceConfigError("feature vector must be finite")
    return np.concatenate([x, p * x])


def expected_demand(theta, x, p: float) -> float:
    theta = _as_theta(theta)
    x = np.asarray(x, dtype=float).reshape(-1)
    if theta.size != 2 * x.size:
        raise InstanceConfigError(
            f"dimension mismatch: theta has {theta.size} entries, x has {x.size}"
        )
    d = x.size
    return float(theta[:d] @ x + p * (theta[d:] @ x))


def realize_demand(theta, x, p: float, noise_draw: float) -> float:
    return expected_demand(theta, x, p) + float(noise_draw)


def revenue(a: float, b: float, p: float) -> float:
    """Expected revenue ``a p + b p^2`` for ``a = <alpha, x>``, ``b = <beta, x>``."""
    return a * p + b * p * p


def optimal_price(theta, x, bounds: PriceBounds) -> tuple[float, float]:
    """Maximize ``a p + b p^2`` over ``[p_min, p_max]``; ties go to ``p_max``.

    Returns ``(price, expected_revenue)``.
    """
    theta = _as_theta(theta)
    x = np.asarray(x, dtype=float).reshape(-1)
    if theta.size != 2 * x.size:
        raise InstanceConfigError(
            f"dimension mismatch: theta has {theta.size} entries, x has {x.size}"
        )
    d = x.size
    a = float(theta[:d] @ x)
    b = float(theta[d:] @ x)
    return _optimal_price_ab(a, b, bounds.p_min, bounds.p_max)


def _optimal_price_ab(a: float, b: float, p_min: float, p_max: float) -> tuple[float, float]:
    if b < 0.0:
        p = min(max(-a / (2.0 * b), p_min), p_max)
        return p, revenue(a, b, p)
    r_lo = revenue(a, b, p_min)
    r_hi = revenue(a, b, p_max)
    if r_hi >= r_lo:
        return p_max, r_hi
    return p_min, r_lo


# ----------------------------------------------------------------------------
# Feature distributions


@dataclass(frozen=True)
class UniformBoxFeatures:
    """Each coordinate i.i.d. uniform on ``[0, upper]``; default upper = 1/sqrt(d)."""

    dim: int
    upper: float | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise InstanceConfigError(f"feature dimension must be >= 1, got {self.dim}")
        if self.upper is None:
            object.__setattr__(self, "upper", 1.0 / math.sqrt(self.dim))
        if not self.upper > 0:
            raise InstanceConfigError("uniform feature upper bound must be positive")

    @property
    def x_max(self) -> float:
        return self.upper * math.sqrt(self.dim)

    @property
    def lambda0(self) -> float:
        # E[x x^T] = (u^2/12) I + (u^2/4) 1 1^T
        return self.upper**2 / 12.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(0.0, self.upper, size=(n, self.dim))

    def to_dict(self) -> dict:
        return {"kind": "uniform", "dim": self.dim, "upper": self.upper}


@dataclass(frozen=True)
class ConstantFeatures:
    """Every round observes the same feature vector (``x = 1`` gives the non-contextual case)."""

    value: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        value = tuple(float(v) for v in np.asarray(self.value, dtype=float).reshape(-1))
        if not value:
            raise InstanceConfigError("constant feature vector must be nonempty")
        object.__setattr__(self, "value", value)

    @property
    def dim(self) -> int:
        return len(self.value)

    @property
    def x_max(self) -> float:
        return float(np.linalg.norm(self.value))

    @property
    def lambda0(self) -> float:
        v = np.asarray(self.value)
        return float(np.linalg.eigvalsh(np.outer(v, v))[0])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        # rng is accepted for interface parity; no randomness is consumed
        return np.tile(np.asarray(self.value, dtype=float), (n, 1))

    def to_dict(self) -> dict:
        return {"kind": "constant", "value": list(self.value)}


def estimate_lambda0(sampler, rng: np.random.Generator, n_draws: int = 10_000) -> float:
    """Monte-Carlo minimum eigenvalue of the feature second-moment matrix."""
    X = sampler.sample(rng, n_draws)
    return float(np.linalg.eigvalsh(X.T @ X / n_draws)[0])


# ----------------------------------------------------------------------------
# Instances


@dataclass(frozen=True)
class EpochInstance:
    theta: DemandParams
    features: object
    horizon: int
    sigma: float
    bounds: PriceBounds

    def __post_init__(self):
        if self.horizon < 2:
            raise InstanceConfigError(f"horizon T must be >= 2, got {self.horizon}")
        if self.sigma < 0:
            raise InstanceConfigError("noise sigma must be nonnegative")
        if self.features.dim != self.theta.dim:
            raise InstanceConfigError(
                f"feature dimension {self.features.dim} != parameter dimension {self.theta.dim}"
            )


@dataclass(frozen=True)
class MetaInstance:
    """N epochs of horizon T whose parameters are drawn from ``N(prior_mean, prior_cov)``.

    The structural constants default to the tightest values implied by the
    prior and the feature distribution; explicit values are validated against it.
    """

    n_epochs: int
    horizon: int
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    sigma: float
    bounds: PriceBounds
    features: object
    x_max: float | None = None
    lambda0: float | None = None
    lambda_bar: float | None = None
    lambda_lower: float | None = None
    kappa: float | None = None
    S: float | None = None
    eig_tol: float = field(default=1e-12, repr=False)

    def __post_init__(self):
        mean = np.asarray(self.prior_mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.prior_cov, dtype=float))
        object.__setattr__(self, "prior_mean", mean)
        object.__setattr__(self, "prior_cov", cov)
        if self.n_epochs < 1:
            raise InstanceConfigError(f"n_epochs must be >= 1, got {self.n_epochs}")
        if self.horizon < 2:
            raise InstanceConfigError(f"horizon T must be >= 2, got {self.horizon}")
        if self.sigma < 0:
            raise InstanceConfigError("noise sigma must be nonnegative")
        d = self.features.dim
        if mean.size != 2 * d:
            raise InstanceConfigError(
                f"prior mean has length {mean.size}, expected 2d = {2 * d}"
            )
        if cov.shape != (2 * d, 2 * d):
            raise InstanceConfigError(
                f"prior covariance has shape {cov.shape}, expected {(2 * d, 2 * d)}"
            )
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
            raise InstanceConfigError("prior covariance must be symmetric")
        eig = np.linalg.eigvalsh(cov)
        if eig[0] <= 0:
            raise InstanceConfigError(
                f"prior covariance must be positive definite (min eigenvalue {eig[0]:.3g})"
            )

        defaults = {
            "x_max": self.features.x_max,
            "lambda0": self.features.lambda0,
            "lambda_bar": float(eig[-1]),
            "lambda_lower": float(eig[0]),
            "kappa": float(np.trace(cov)),
            "S": float(np.linalg.norm(mean)),
        }
        for name, value in defaults.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)

        tol = self.eig_tol
        if self.lambda0 <= 0:
            raise InstanceConfigError("lambda0 must be positive")
        if eig[-1] > self.lambda_bar * (1 + tol):
            raise InstanceConfigError("lambda_bar is below the largest prior eigenvalue")
        if eig[0] < self.lambda_lower * (1 - tol):
            raise InstanceConfigError("lambda_lower exceeds the smallest prior eigenvalue")
        if np.trace(cov) > self.kappa * (1 + tol):
            raise InstanceConfigError("trace of prior covariance exceeds kappa")
        if np.linalg.norm(mean) > self.S * (1 + tol) + tol:
            raise InstanceConfigError("norm of prior mean exceeds S")
        if self.features.x_max > self.x_max * (1 + tol):
            raise InstanceConfigError("feature distribution exceeds x_max")

    @property
    def dim(self) -> int:
        return self.features.dim

    def epoch(self, theta) -> EpochInstance:
        if not isinstance(theta, DemandParams):
            theta = DemandParams.from_theta(theta)
        return EpochInstance(theta, self.features, self.horizon, self.sigma, self.bounds)


# ----------------------------------------------------------------------------
# Derived constants


@dataclass(frozen=True)
class DerivedConstants:
    c0: float
    c1: float
    c2: float
    c3: float
    c4: float
    R: float

    @property
    def degenerate(self) -> bool:
        return self.c0 <= 0.0

    def require_nondegenerate(self) -> None:
        if self.degenerate:
            raise DegenerateConstantsError(
                "meta-learning constants degenerate (c0 = 0 because p_min == p_max)"
            )


def _c0_objective(phi: float, p_min: float, p_max: float) -> float:
    a = math.cos(phi)
    b = math.sin(phi)
    return (p_min * b - a) ** 2 + (p_max * b - a) ** 2


def compute_c0(p_min: float, p_max: float, grid: int = 10_000, tol: float = 1e-10) -> float:
    """One third of the minimum over the unit quarter-circle ``(|z1|, |z2|)``.

    The objective only depends on the two norms, so the minimisation runs over
    an angle in ``[0, pi/2]``: dense grid, then ternary refinement.
    """
    if p_min == p_max:
        return 0.0
    phis = np.linspace(0.0, math.pi / 2, grid)
    a, b = np.cos(phis), np.sin(phis)
    vals = (p_min * b - a) ** 2 + (p_max * b - a) ** 2
    k = int(np.argmin(vals))
    lo = phis[max(k - 1, 0)]
    hi = phis[min(k + 1, grid - 1)]
    while hi - lo > tol:
        m1 = lo + (hi - lo) / 3
        m2 = hi - (hi - lo) / 3
        if _c0_objective(m1, p_min, p_max) <= _c0_objective(m2, p_min, p_max):
            hi = m2
        else:
            lo = m1
    best = min(float(vals[k]), _c0_objective(0.5 * (lo + hi), p_min, p_max))
    return max(best, 0.0) / 3.0


def compute_derived_constants(meta: MetaInstance) -> DerivedConstants:
    """Constants c0..c4 and the subgaussian proxy R.

    c0 = 0 is returned (not raised) when the price interval is a point; the
    meta-learning policies check ``require_nondegenerate`` themselves.
    """
    p_min, p_max = meta.bounds.p_min, meta.bounds.p_max
    N, T = meta.n_epochs, meta.horizon
    x_max, lam0 = meta.x_max, meta.lambda0
    lam_bar, lam_low = meta.lambda_bar, meta.lambda_lower
    sigma2 = meta.sigma**2

    R2 = x_max**2 * lam_bar * (1 + p_max**2) + sigma2
    c0 = compute_c0(p_min, p_max)
    if c0 <= 0.0:
        return DerivedConstants(0.0, 0.0, math.inf, math.inf, math.inf, math.sqrt(R2))
    c1 = c0 * lam0 / (math.sqrt(1 + p_max**2) * x_max)
    c2 = 4 * R2 / (lam_low * c0 * lam0)
    c3 = 16 * sigma2 * (math.log(2) + math.log(N**2 * T)) / (c0 * lam0)
    c4 = max(2 * c3 / lam_low, (32 / lam_low) * math.sqrt(lam_bar + 2 * c3))
    return DerivedConstants(c0=c0, c1=c1, c2=c2, c3=c3, c4=c4, R=math.sqrt(R2))
