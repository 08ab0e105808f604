"""Cross-epoch learning of the shared prior.

Meta-DP (known prior covariance) explores with UCB for the first N0 epochs,
then runs Thompson sampling from ``N(theta_hat_i, eta_i * Sigma)`` where
``theta_hat_i`` is the OLS fit on every epoch's round-1 observation and
``eta_i = 1 + rho / sqrt(i)``. Meta-DP++ additionally spends the first N2
rounds of each of the first N1 epochs on forced p_min / p_max prices, fits
each of those epochs by OLS and uses their empirical covariance (plus a
correction) in place of the unknown prior covariance. The greedy ablation
is the same with ``eta_i = 1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core_model import (
    DemandParams,
    DerivedConstants,
    InstanceConfigError,
    MetaInstance,
)
from .gaussian import GaussianBelief
from .policies import init_price

log = logging.getLogger(__name__)

__all__ = [
    "HorizonTooShortError",
    "UnidentifiableError",
    "log_e_over_2",
    "compute_N0",
    "compute_N1_N2",
    "ExplorationSchedule",
    "resolve_schedule",
    "MetaState",
    "begin_epoch",
    "record_epoch_initialization",
    "estimate_prior_mean",
    "widen_prior",
    "widening_factor",
    "estimate_epoch_theta",
    "empirical_covariance",
    "correction_coefficient",
    "correction_matrix",
    "covariance_error_bound",
    "forced_schedule",
    "EpochPlan",
    "meta_dp_epoch_plan",
    "meta_dp_pp_epoch_plan",
    "floor_pd",
    "freeze_covariance",
    "practical_schedule",
]

GRAM_EIG_FLOOR = 1e-10
FALLBACK_RIDGE = 1e-8
GRAM_REFRESH_EVERY = 64


class HorizonTooShortError(InstanceConfigError):
    pass


class UnidentifiableError(ValueError):
    pass


def log_e_over_2(x: float) -> float:
    return math.log(x) / math.log(math.e / 2)


def _even_ceil(x: float) -> int:
    n = max(int(math.ceil(x)), 2)
    return n + (n % 2)


# ----------------------------------------------------------------------------
# Exploration lengths


def compute_N0(meta: MetaInstance, constants: DerivedConstants, rho: float = 1.0,
               alternate: bool = False) -> int:
    """Number of UCB exploration epochs.

    ``alternate`` selects the variant that trades exploration epochs against a
    wider prior ``eta_i = 1 + rho / sqrt(i)``.
    """
    constants.require_nondegenerate()
    d, N, T = meta.dim, meta.n_epochs, meta.horizon
    c1, c2 = constants.c1, constants.c2
    if alternate:
        terms = (
            log_e_over_2(2 * d * N * T) / c1,
            d**2,
            (c2 / rho * math.log(2**d * N**2 * T)) ** 2,
        )
    else:
        terms = (
            2 * log_e_over_2(2 * d * N * T) / c1,
            d**2,
            (c2 * math.log(2**d * N**2 * T)) ** 2,
        )
    return max(int(math.ceil(max(terms))), 1)


def compute_N1_N2(meta: MetaInstance, constants: DerivedConstants, N0: int | None = None,
                  check_horizon: bool = True) -> tuple[int, int]:
    """Forced-exploration epochs N1 and rounds per epoch N2 (even)."""
    constants.require_nondegenerate()
    if N0 is None:
        N0 = compute_N0(meta, constants)
    d, N, T = meta.dim, meta.n_epochs, meta.horizon
    c1, c4 = constants.c1, constants.c4
    n1 = max(4 * c4**2 * (d + math.log(N * T)) * math.sqrt(N), N0)
    n2 = max(2 * c4**2 * d * N**0.25, 2 * log_e_over_2(2 * d * N**2 * T) / c1)
    N1 = max(int(math.ceil(n1)), 1)
    N2 = _even_ceil(n2)
    if check_horizon and N2 > T:
        raise HorizonTooShortError(
            f"horizon too short for forced exploration: N2 = {N2} > T = {T}"
        )
    return N1, N2


@dataclass(frozen=True)
class ExplorationSchedule:
    """Resolved exploration lengths and covariance correction for one run."""

    n0: int
    n1: int
    n2: int
    correction: float
    mode: str = "practical"

    def to_dict(self) -> dict:
        return {"mode": self.mode, "n0": self.n0, "n1": self.n1, "n2": self.n2,
                "correction": self.correction}


def practical_schedule(meta: MetaInstance) -> ExplorationSchedule:
    """Desk-scale exploration lengths.

    The theoretical lengths exceed any feasible N and T by many orders of
    magnitude, so experiments use the dimension-driven parts of the formulas.
    N0 keeps the ``d^2`` term and a ``10 d`` floor: the first term of the
    formula is there to make ``lambda_min(V_i) >= c0 lambda0 i / 2`` hold, and
    by Monte Carlo that happens from about ``9.5 d`` epochs on for the
    synthetic feature laws (95% of runs). N2 keeps the ``d N^{1/4}`` growth,
    N1 keeps ``N^{1/2}``.
    """
    d, N = meta.dim, meta.n_epochs
    n0 = max(d * d, 10 * d)
    n1 = max(n0, int(math.ceil(math.sqrt(N))), 2 * d + 1)
    n2 = _even_ceil(max(2 * d * N**0.25, 4 * d))
    return ExplorationSchedule(n0=n0, n1=n1, n2=n2, correction=0.0, mode="practical")


def resolve_schedule(meta: MetaInstance, constants: DerivedConstants, mode: str = "practical",
                     rho: float = 1.0, alternate_n0: bool = False, n0: int | None = None,
                     n1: int | None = None, n2: int | None = None,
                     correction: float | None = None, need_pp: bool = True) -> ExplorationSchedule:
    """Exploration schedule from ``mode`` ("theory" or "practical") plus explicit overrides."""
    constants.require_nondegenerate()
    if mode == "theory":
        N0 = compute_N0(meta, constants, rho=rho, alternate=alternate_n0)
        N1, N2 = compute_N1_N2(meta, constants, N0=N0, check_horizon=False)
        base = ExplorationSchedule(N0, N1, N2, 0.0, mode="theory")
    elif mode == "practical":
        base = practical_schedule(meta)
    else:
        raise InstanceConfigError(f"unknown exploration mode {mode!r}")
    n0 = base.n0 if n0 is None else int(n0)
    n1 = max(base.n1 if n1 is None else int(n1), 1)
    n2 = base.n2 if n2 is None else int(n2)
    if n2 % 2:
        raise InstanceConfigError(f"N2 must be even, got {n2}")
    if correction is None:
        correction = (correction_coefficient(constants, n1, n2, meta.lambda_bar, meta)
                      if mode == "theory" and n1 >= 2 else 0.0)
    if need_pp and n2 > meta.horizon:
        raise HorizonTooShortError(
            f"horizon too short for forced exploration: N2 = {n2} > T = {meta.horizon}"
        )
    return ExplorationSchedule(n0=max(n0, 1), n1=n1, n2=n2, correction=float(correction),
                               mode=base.mode)


# ----------------------------------------------------------------------------
# Prior-mean estimation from round-1 data


@dataclass
class MetaState:
    """Cross-epoch data owned by one meta-learning run."""

    dim2: int
    rho: float = 1.0
    widen: bool = True
    init_designs: list = field(default_factory=list)
    init_demands: list = field(default_factory=list)
    theta_tildes: list = field(default_factory=list)
    frozen_cov: np.ndarray | None = None
    epoch: int = 0
    _gram: np.ndarray = field(init=False, repr=False)
    _moment: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._gram = np.zeros((self.dim2, self.dim2))
        self._moment = np.zeros(self.dim2)

    @property
    def i(self) -> int:
        return self.epoch

    def gram(self) -> np.ndarray:
        return self._gram.copy()

    def moment(self) -> np.ndarray:
        return self._moment.copy()


def begin_epoch(state: MetaState) -> MetaState:
    if len(state.init_designs) != state.epoch:
        raise RuntimeError(f"epoch {state.epoch} has no round-1 record yet")
    state.epoch += 1
    return state


def record_epoch_initialization(state: MetaState, m, demand: float) -> MetaState:
    """Append the current epoch's round-1 observation (once per epoch)."""
    if len(state.init_designs) != state.epoch - 1:
        raise RuntimeError(
            f"round-1 observation already recorded for epoch {state.epoch}"
            if state.epoch else "begin_epoch must be called before recording"
        )
    m = np.asarray(m, dtype=float).reshape(-1).copy()
    if m.size != state.dim2:
        raise InstanceConfigError(f"design has length {m.size}, expected {state.dim2}")
    state.init_designs.append(m)
    state.init_demands.append(float(demand))
    n = len(state.init_designs)
    if n % GRAM_REFRESH_EVERY == 0:
        X = np.asarray(state.init_designs)
        state._gram = X.T @ X
        state._moment = X.T @ np.asarray(state.init_demands)
    else:
        state._gram += np.outer(m, m)
        state._moment += demand * m
    return state


def estimate_prior_mean(state: MetaState, fallback: bool = False) -> DemandParams:
    """OLS on all recorded round-1 observations.

    With ``fallback`` a numerically singular gram is regularised by a tiny ridge
    instead of raising.
    """
    gram = state._gram
    lam_min = np.linalg.eigvalsh(gram)[0] if state.init_designs else 0.0
    if not lam_min > GRAM_EIG_FLOOR:
        if not fallback:
            raise UnidentifiableError(
                f"prior mean unidentifiable yet (min gram eigenvalue {lam_min:.3g}"
                f" after {state.epoch} epochs)"
            )
        log.warning("singular round-1 gram at epoch %d; using ridge %g", state.epoch,
                    FALLBACK_RIDGE)
        gram = gram + FALLBACK_RIDGE * np.eye(state.dim2)
    return DemandParams.from_theta(np.linalg.solve(gram, state._moment))


def widening_factor(i: int, rho: float = 1.0) -> float:
    if i < 1:
        raise ValueError("epoch index must be >= 1")
    return 1.0 + rho / math.sqrt(i)


def widen_prior(theta_hat, base_cov, i: int, rho: float = 1.0) -> GaussianBelief:
    if isinstance(theta_hat, DemandParams):
        theta_hat = theta_hat.theta
    return GaussianBelief.from_moments(theta_hat, widening_factor(i, rho) * np.asarray(base_cov))


# ----------------------------------------------------------------------------
# Prior-covariance estimation


def estimate_epoch_theta(designs, demands) -> DemandParams:
    """Unregularised OLS over one epoch's forced-exploration rounds."""
    X = np.atleast_2d(np.asarray(designs, dtype=float))
    D = np.asarray(demands, dtype=float).reshape(-1)
    gram = X.T @ X
    if X.shape[0] < X.shape[1] or not np.linalg.eigvalsh(gram)[0] > GRAM_EIG_FLOOR * max(
        1.0, np.trace(gram)
    ):
        raise UnidentifiableError("singular forced-exploration gram; epoch parameters unidentified")
    return DemandParams.from_theta(np.linalg.solve(gram, X.T @ D))


def empirical_covariance(theta_tildes) -> np.ndarray:
    Th = np.asarray([t.theta if isinstance(t, DemandParams) else t for t in theta_tildes],
                    dtype=float)
    if Th.ndim != 2 or Th.shape[0] < 2:
        raise ValueError("empirical covariance needs at least 2 epoch estimates")
    centred = Th - Th.mean(axis=0)
    return centred.T @ centred / (Th.shape[0] - 1)


def correction_coefficient(constants: DerivedConstants, N1: int, N2: int, lambda_bar: float,
                           meta: MetaInstance) -> float:
    if N1 < 2 or N2 < 1:
        raise ValueError("correction needs N1 >= 2 and N2 >= 1")
    d, N, T = meta.dim, meta.n_epochs, meta.horizon
    c3 = constants.c3
    return c3 * d / N2 + 16 * math.sqrt(
        (lambda_bar + 2 * c3 / ((N1 - 1) * N2)) * ((math.log(9) * d + math.log(N * T)) / N1)
    )


def correction_matrix(constants: DerivedConstants, N1: int, N2: int, lambda_bar: float,
                      meta: MetaInstance) -> np.ndarray:
    return correction_coefficient(constants, N1, N2, lambda_bar, meta) * np.eye(2 * meta.dim)


def covariance_error_bound(constants: DerivedConstants, N1: int, N2: int, lambda_bar: float,
                           d: int, delta: float) -> float:
    """High-probability operator-norm bound on the empirical prior covariance error."""
    c3 = constants.c3
    L = (math.log(9) * d + math.log(1 / delta)) / N1
    return c3 * d / N2 + 16 * math.sqrt(lambda_bar + 2 * c3 / ((N1 - 1) * N2)) * max(L, math.sqrt(L))


def floor_pd(cov, eps: float = 1e-8) -> np.ndarray:
    """Shift the spectrum so the smallest eigenvalue is at least ``eps``."""
    cov = 0.5 * (np.asarray(cov, dtype=float) + np.asarray(cov, dtype=float).T)
    lam_min = np.linalg.eigvalsh(cov)[0]
    return cov + max(0.0, eps - lam_min) * np.eye(cov.shape[0])


# ----------------------------------------------------------------------------
# Epoch plans


def forced_schedule(i: int, n2: int, p_min: float, p_max: float) -> np.ndarray:
    """p_min then p_max (N2/2 rounds each) on even epochs, the reverse on odd ones."""
    half = n2 // 2
    first, second = (p_min, p_max) if i % 2 == 0 else (p_max, p_min)
    return np.array([first] * half + [second] * (n2 - half), dtype=float)


@dataclass(frozen=True)
class EpochPlan:
    """What one epoch runs: fixed prices for the leading rounds, then ``tail``.

    ``prior`` is the round-2 Thompson-sampling belief when ``tail == "ts"``.
    """

    forced_prices: np.ndarray
    tail: str
    prior: GaussianBelief | None = None
    collect_theta: bool = False


def meta_dp_epoch_plan(state: MetaState, meta: MetaInstance, schedule: ExplorationSchedule,
                       base_cov=None) -> EpochPlan:
    """Plan for epoch ``state.i``; the current round-1 record must already be in ``state``.

    ``base_cov`` defaults to the known prior covariance.
    """
    i = state.i
    if i < 1 or len(state.init_designs) != i:
        raise RuntimeError("record the epoch's round-1 observation before planning")
    first = init_price(i, meta.bounds)
    if i < schedule.n0:
        return EpochPlan(np.array([first]), "ucb")
    theta_hat = estimate_prior_mean(state, fallback=True)
    cov = meta.prior_cov if base_cov is None else base_cov
    rho = state.rho if state.widen else 0.0
    eta = 1.0 + rho / math.sqrt(i)
    return EpochPlan(np.array([first]), "ts",
                     prior=GaussianBelief.from_moments(theta_hat.theta, eta * np.asarray(cov)))


def meta_dp_pp_epoch_plan(state: MetaState, meta: MetaInstance,
                          schedule: ExplorationSchedule) -> EpochPlan:
    """Plan for epoch ``state.i`` when the prior covariance is unknown."""
    i = state.i
    if i < 1:
        raise RuntimeError("record the epoch's round-1 observation before planning")
    if i <= schedule.n1:
        if schedule.n2 > meta.horizon:
            raise HorizonTooShortError(
                f"horizon too short for forced exploration: N2 = {schedule.n2} > T = {meta.horizon}"
            )
        prices = forced_schedule(i, schedule.n2, meta.bounds.p_min, meta.bounds.p_max)
        return EpochPlan(prices, "ucb", collect_theta=True)
    if state.frozen_cov is None:
        raise RuntimeError("prior covariance not frozen; finish the exploration epochs first")
    return meta_dp_epoch_plan(state, meta, ExplorationSchedule(0, schedule.n1, schedule.n2,
                                                               schedule.correction),
                              base_cov=state.frozen_cov)


def freeze_covariance(state: MetaState, schedule: ExplorationSchedule) -> np.ndarray:
    """Empirical covariance of the collected epoch fits plus the correction."""
    cov = empirical_covariance(state.theta_tildes) + schedule.correction * np.eye(state.dim2)
    lam_min = np.linalg.eigvalsh(0.5 * (cov + cov.T))[0]
    if lam_min < 1e-8:
        log.warning("estimated prior covariance not positive definite (min eig %.3g); flooring",
                    lam_min)
    state.frozen_cov = floor_pd(cov)
    state.frozen_cov.setflags(write=False)
    return state.frozen_cov

