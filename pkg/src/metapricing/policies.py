"""Per-epoch pricing policies, one round at a time.

These are the reference implementations. The simulator's fast path lives in
:mod:`metapricing.kernels` and is checked against these functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core_model import DemandParams, PriceBounds, make_design_vector, optimal_price
from .gaussian import GaussianBelief, posterior_update, sample

__all__ = [
    "UCB_GRID",
    "init_price",
    "TsEpochState",
    "ts_start",
    "ts_choose_price",
    "ts_observe",
    "UcbEpochState",
    "ucb_start",
    "ucb_estimate",
    "ucb_bonus_coefficients",
    "ucb_objective",
    "ucb_choose_price",
    "ucb_observe",
    "theory_confidence_multiplier",
    "oversampling_scale",
    "prior_free_sample",
    "prior_independent_ts_step",
    "maximize_on_interval",
]

UCB_GRID = 2048
REFINE_TOL = 1e-9


def init_price(epoch_index: int, bounds: PriceBounds) -> float:
    """Round-1 price: p_min on even epochs, p_max on odd ones (1-based index)."""
    return bounds.p_min if epoch_index % 2 == 0 else bounds.p_max


# ----------------------------------------------------------------------------
# Thompson sampling with a Gaussian prior


@dataclass(frozen=True)
class TsEpochState:
    belief: GaussianBelief
    bounds: PriceBounds
    sigma: float
    t: int = 1


def ts_start(mean, cov, bounds: PriceBounds, sigma: float) -> TsEpochState:
    return TsEpochState(GaussianBelief.from_moments(mean, cov), bounds, sigma, t=1)


def ts_choose_price(state: TsEpochState, x, std_normals) -> float:
    theta = sample(state.belief, std_normals)
    return optimal_price(theta, x, state.bounds)[0]


def ts_observe(state: TsEpochState, x, p: float, demand: float) -> TsEpochState:
    m = make_design_vector(x, p)
    belief = posterior_update(state.belief, m, demand, state.sigma)
    return replace(state, belief=belief, t=state.t + 1)


# ----------------------------------------------------------------------------
# Ridge regression state shared by UCB and prior-free Thompson sampling


@dataclass(frozen=True)
class UcbEpochState:
    """``gram = I + sum m m^T`` and ``moment = sum D m`` over folded rounds.

    ``confidence`` is either a fixed multiplier or ``"theory"``, in which case
    the radius grows with the number of folded observations.
    """

    gram: np.ndarray
    moment: np.ndarray
    bounds: PriceBounds
    t: int = 1
    n_obs: int = 0
    confidence: float | str = 1.0
    R: float = 1.0
    S: float = 0.0
    x_max: float = 1.0
    delta: float = 0.01

    @property
    def dim(self) -> int:
        return self.moment.size

    def multiplier(self) -> float:
        if self.confidence == "theory":
            return theory_confidence_multiplier(
                self.n_obs, self.dim, self.R, self.S, self.x_max, self.bounds.p_max, self.delta
            )
        return float(self.confidence)


def ucb_start(dim2: int, bounds: PriceBounds, confidence: float | str = 1.0, **kw) -> UcbEpochState:
    return UcbEpochState(np.eye(dim2), np.zeros(dim2), bounds, confidence=confidence, **kw)


def theory_confidence_multiplier(
    n_obs: int, dim2: int, R: float, S: float, x_max: float, p_max: float, delta: float
) -> float:
    """Self-normalised confidence radius for a unit ridge regulariser."""
    return R * math.sqrt(2 * dim2 * math.log((1 + n_obs * x_max**2 * (1 + p_max**2)) / delta)) + S


def ucb_estimate(state: UcbEpochState) -> DemandParams:
    return DemandParams.from_theta(np.linalg.solve(state.gram, state.moment))


def ucb_bonus_coefficients(state: UcbEpochState, x) -> tuple[float, float, float]:
    """``||(x, p x)||^2`` in the inverse-gram norm is ``q0 + q1 p + q2 p^2``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    d = x.size
    Vinv = np.linalg.inv(state.gram)
    A, B, C = Vinv[:d, :d], Vinv[:d, d:], Vinv[d:, d:]
    return float(x @ A @ x), float(2 * x @ B @ x), float(x @ C @ x)


def ucb_objective(state: UcbEpochState, x, p):
    theta = ucb_estimate(state)
    x = np.asarray(x, dtype=float).reshape(-1)
    a, b = theta.alpha @ x, theta.beta @ x
    q0, q1, q2 = ucb_bonus_coefficients(state, x)
    p = np.asarray(p, dtype=float)
    bonus = np.sqrt(np.maximum(q0 + q1 * p + q2 * p * p, 0.0))
    return a * p + b * p * p + state.multiplier() * bonus


def maximize_on_interval(f, lo: float, hi: float, grid: int = UCB_GRID, tol: float = REFINE_TOL) -> float:
    """Argmax of a vectorised ``f`` on ``[lo, hi]`` by grid plus ternary refinement.

    Every local grid maximum is refined on its bracketing pair of cells; on
    ties the larger price wins.
    """
    if lo == hi:
        return lo
    ps = np.linspace(lo, hi, grid)
    vals = f(ps)
    best_p, best_v = hi, float(vals[-1])
    for k in range(grid):
        left = vals[k - 1] if k > 0 else -np.inf
        right = vals[k + 1] if k + 1 < grid else -np.inf
        if not (vals[k] >= left and vals[k] >= right):
            continue
        a, b = ps[max(k - 1, 0)], ps[min(k + 1, grid - 1)]
        while b - a > tol:
            m1 = a + (b - a) / 3
            m2 = b - (b - a) / 3
            if float(f(m1)) < float(f(m2)):
                a = m1
            else:
                b = m2
        for cand in (ps[k], 0.5 * (a + b)):
            v = float(f(cand))
            if v > best_v or (v == best_v and cand > best_p):
                best_p, best_v = float(cand), v
    return best_p


def ucb_choose_price(state: UcbEpochState, x) -> float:
    theta = ucb_estimate(state)
    x = np.asarray(x, dtype=float).reshape(-1)
    a, b = float(theta.alpha @ x), float(theta.beta @ x)
    w = state.multiplier()
    if w == 0.0:
        return optimal_price(theta, x, state.bounds)[0]
    q0, q1, q2 = ucb_bonus_coefficients(state, x)

    def f(p):
        return a * p + b * p * p + w * np.sqrt(np.maximum(q0 + q1 * p + q2 * p * p, 0.0))

    return maximize_on_interval(f, state.bounds.p_min, state.bounds.p_max)


def ucb_observe(state: UcbEpochState, x, p: float, demand: float) -> UcbEpochState:
    m = make_design_vector(x, p)
    return replace(
        state,
        gram=state.gram + np.outer(m, m),
        moment=state.moment + demand * m,
        t=state.t + 1,
        n_obs=state.n_obs + 1,
    )


# ----------------------------------------------------------------------------
# Prior-independent (linear) Thompson sampling


def oversampling_scale(R: float, dim2: int, horizon: int, delta: float | None = None) -> float:
    """Posterior inflation ``R sqrt(9 d ln(T / delta))`` with ``delta = 1/T`` by default."""
    if delta is None:
        delta = 1.0 / horizon
    return R * math.sqrt(9 * dim2 * math.log(horizon / delta))


def prior_free_sample(state: UcbEpochState, v: float, std_normals) -> DemandParams:
    """Draw from ``N(ridge estimate, v^2 gram^{-1})``."""
    mean = np.linalg.solve(state.gram, state.moment)
    Vinv = np.linalg.inv(state.gram)
    Vinv = 0.5 * (Vinv + Vinv.T)
    z = np.asarray(std_normals, dtype=float).reshape(-1)
    return DemandParams.from_theta(mean + v * (np.linalg.cholesky(Vinv) @ z))


def prior_independent_ts_step(state: UcbEpochState, x, v: float, std_normals) -> float:
    theta = prior_free_sample(state, v, std_normals)
    return optimal_price(theta, x, state.bounds)[0]
