"""Multivariate Gaussian beliefs for the linear-Gaussian demand model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_model import DemandParams

__all__ = [
    "NotPositiveDefiniteError",
    "DegenerateNoiseError",
    "GaussianBelief",
    "validate_pd",
    "sample",
    "posterior_update",
]

SYMMETRY_RTOL = 1e-10


class NotPositiveDefiniteError(ValueError):
    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


class DegenerateNoiseError(ValueError):
    pass


def validate_pd(matrix) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Pivots are reported 1-based, so ``diag(1, -1)`` fails at pivot 2.
    """
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n):
        raise NotPositiveDefiniteError(f"matrix must be square, got shape {A.shape}")
    scale = max(float(np.max(np.abs(A))), np.finfo(float).tiny)
    if np.max(np.abs(A - A.T)) > SYMMETRY_RTOL * scale:
        raise NotPositiveDefiniteError("matrix is not symmetric within tolerance")
    L = np.zeros_like(A)
    for j in range(n):
        s = A[j, j] - L[j, :j] @ L[j, :j]
        if not s > 0.0:
            raise NotPositiveDefiniteError(
                f"non-positive pivot {s:.3g} at index {j + 1}", pivot=j + 1
            )
        L[j, j] = np.sqrt(s)
        L[j + 1 :, j] = (A[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


@dataclass(frozen=True)
class GaussianBelief:
    """Immutable ``N(mean, cov)`` with a cached lower Cholesky factor."""

    mean: np.ndarray
    cov: np.ndarray
    factor: np.ndarray

    @classmethod
    def from_moments(cls, mean, cov) -> "GaussianBelief":
        mean = np.asarray(mean, dtype=float).reshape(-1).copy()
        cov = np.atleast_2d(np.asarray(cov, dtype=float)).copy()
        if cov.shape != (mean.size, mean.size):
            raise NotPositiveDefiniteError(
                f"covariance shape {cov.shape} does not match mean length {mean.size}"
            )
        factor = validate_pd(cov)
        mean.setflags(write=False)
        cov.setflags(write=False)
        factor.setflags(write=False)
        return cls(mean, cov, factor)

    @property
    def dim(self) -> int:
        return self.mean.size

    def scaled(self, eta: float) -> "GaussianBelief":
        return GaussianBelief.from_moments(self.mean, eta * self.cov)


def sample(belief: GaussianBelief, standard_normals) -> DemandParams:
    z = np.asarray(standard_normals, dtype=float).reshape(-1)
    return DemandParams.from_theta(belief.mean + belief.factor @ z)


def posterior_update(belief: GaussianBelief, m, demand: float, sigma: float) -> GaussianBelief:
    """Conjugate update after observing ``demand = <theta, m> + N(0, sigma^2)``.

    Sherman-Morrison on the covariance, then symmetrise and re-factor.
    """
    if not sigma > 0:
        raise DegenerateNoiseError("degenerate noise; posterior update undefined")
    m = np.asarray(m, dtype=float).reshape(-1)
    g = belief.cov @ m
    s = sigma**2 + m @ g
    cov = belief.cov - np.outer(g, g) / s
    cov = 0.5 * (cov + cov.T)
    mean = belief.mean + g * ((demand - m @ belief.mean) / s)
    return GaussianBelief.from_moments(mean, cov)
