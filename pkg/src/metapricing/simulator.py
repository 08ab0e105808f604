"""Seeded, paired execution of meta-experiments.

Every policy in a paired run sees the same environment (parameter draws,
feature sequences, demand noise) and is scored against the meta oracle, i.e.
Thompson sampling started from the true prior. Regret is measured in
expected revenue, so demand noise only enters through what policies learn.
"""

from __future__ import annotations

import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .core_model import (
    InstanceConfigError,
    MetaInstance,
    PriceBounds,
    compute_derived_constants,
    make_design_vector,
    optimal_price,
    realize_demand,
    revenue,
)
from .gaussian import DegenerateNoiseError, GaussianBelief
from .meta_learner import (
    EpochPlan,
    ExplorationSchedule,
    MetaState,
    begin_epoch,
    estimate_epoch_theta,
    freeze_covariance,
    meta_dp_epoch_plan,
    meta_dp_pp_epoch_plan,
    UnidentifiableError,
    record_epoch_initialization,
    resolve_schedule,
)
from .policies import (
    init_price,
    oversampling_scale,
    prior_independent_ts_step,
    ts_choose_price,
    ts_observe,
    TsEpochState,
    ucb_choose_price,
    ucb_observe,
    ucb_start,
)

log = logging.getLogger(__name__)

POLICY_KINDS = ("meta-oracle", "meta-dp", "greedy", "meta-dp-pp", "greedy-pp", "prior-free",
                "ucb-only")
ORACLE = "meta-oracle"

_ENV_PURPOSES = {"theta": 0, "features": 1, "noise": 2}
_KIND_ENV, _KIND_DECISION, _KIND_AUX = 0, 1, 2


def _label_id(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


# ----------------------------------------------------------------------------
# Random streams


@dataclass(frozen=True)
class SeedPlan:
    """Counter-style stream derivation from one master seed.

    Each stream is a Philox generator keyed by ``(trial, epoch, kind, label)``,
    so adding a policy or a trial never shifts any other stream.
    """

    master_seed: int

    def _generator(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.master_seed, spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.Philox(ss))

    def environment(self, trial: int, epoch: int, purpose: str) -> np.random.Generator:
        return self._generator(trial, epoch, _KIND_ENV, _ENV_PURPOSES[purpose])

    def decision(self, trial: int, epoch: int, policy: str) -> np.random.Generator:
        return self._generator(trial, epoch, _KIND_DECISION, _label_id(policy))

    def auxiliary(self, trial: int, label: str) -> np.random.Generator:
        return self._generator(trial, 0, _KIND_AUX, _label_id(label))


# ----------------------------------------------------------------------------
# Environments


@dataclass(frozen=True)
class EpochEnvironment:
    theta: np.ndarray
    X: np.ndarray
    noise: np.ndarray

    @property
    def horizon(self) -> int:
        return self.X.shape[0]


class SyntheticEnvironment:
    """Epoch parameters from the true prior, features from the instance sampler."""

    def __init__(self, meta: MetaInstance, seed_plan: SeedPlan):
        self.meta = meta
        self.seed_plan = seed_plan
        self._prior_factor = np.linalg.cholesky(meta.prior_cov)

    def __call__(self, trial: int, epoch: int) -> EpochEnvironment:
        meta, sp = self.meta, self.seed_plan
        z = sp.environment(trial, epoch, "theta").standard_normal(2 * meta.dim)
        theta = meta.prior_mean + self._prior_factor @ z
        X = meta.features.sample(sp.environment(trial, epoch, "features"), meta.horizon)
        noise = meta.sigma * sp.environment(trial, epoch, "noise").standard_normal(meta.horizon)
        return EpochEnvironment(theta, np.ascontiguousarray(X, dtype=float), noise)


# ----------------------------------------------------------------------------
# One epoch


@dataclass(frozen=True)
class RunSettings:
    """Knobs shared by every policy in a run."""

    schedule: ExplorationSchedule | None = None
    rho: float = 1.0
    ucb_mode: str = "fixed"
    ucb_multiplier: float = 1.0
    prior_free_scale: float | None = None
    prior_free_delta: float | None = None
    engine: str = "numba"


@dataclass(frozen=True)
class EpochTrace:
    X: np.ndarray
    prices: np.ndarray
    demands: np.ndarray
    revenue: np.ndarray
    oracle_revenue: np.ndarray

    @property
    def horizon(self) -> int:
        return self.prices.size

    @property
    def regret(self) -> float:
        return float(np.sum(self.oracle_revenue - self.revenue))


@dataclass(frozen=True)
class EpochArgs:
    """Everything the epoch loop needs besides the environment and normals."""

    forced: np.ndarray
    tail: str
    bounds: PriceBounds
    prior: GaussianBelief | None = None
    sigma_model: float = 1.0
    update_on_forced: bool = False
    ucb_mode: str = "fixed"
    ucb_multiplier: float = 1.0
    R: float = 1.0
    S: float = 0.0
    x_max: float = 1.0
    delta: float = 0.01
    prior_free_scale: float = 0.0


_TAILS = {"ts": kernels.TAIL_TS, "ucb": kernels.TAIL_UCB, "prior-free": kernels.TAIL_PRIOR_FREE}


def run_epoch(args: EpochArgs, env: EpochEnvironment, normals: np.ndarray,
              engine: str = "numba") -> EpochTrace:
    """Execute one epoch. ``normals`` is a ``(T, 2d)`` block of decision draws."""
    T = env.horizon
    forced = np.ascontiguousarray(args.forced[:T], dtype=float)
    if args.tail == "ts" and args.prior is None:
        raise InstanceConfigError("Thompson-sampling tail needs a prior")
    if args.tail == "ts" and not args.sigma_model > 0:
        raise DegenerateNoiseError("degenerate noise; posterior update undefined")
    if engine == "numba":
        n2 = env.theta.size
        mean0 = args.prior.mean if args.prior is not None else np.zeros(n2)
        cov0 = args.prior.cov if args.prior is not None else np.eye(n2)
        prices, demands, rev, opt = kernels.epoch_kernel(
            env.X, env.noise, env.theta, np.ascontiguousarray(normals), forced,
            _TAILS[args.tail], np.ascontiguousarray(mean0), np.ascontiguousarray(cov0),
            float(args.sigma_model), bool(args.update_on_forced),
            float(args.bounds.p_min), float(args.bounds.p_max),
            kernels.CONF_THEORY if args.ucb_mode == "theory" else kernels.CONF_FIXED,
            float(args.ucb_multiplier), float(args.R), float(args.S), float(args.x_max),
            float(args.delta), float(args.prior_free_scale),
        )
        return EpochTrace(env.X, prices, demands, rev, opt)
    if engine == "python":
        return _run_epoch_python(args, env, normals, forced)
    raise ValueError(f"unknown engine {engine!r}")


def _run_epoch_python(args: EpochArgs, env: EpochEnvironment, normals, forced) -> EpochTrace:
    T, d = env.X.shape
    bounds = args.bounds
    prices, demands = np.empty(T), np.empty(T)
    rev, opt = np.empty(T), np.empty(T)
    ts = TsEpochState(args.prior, bounds, args.sigma_model) if args.tail == "ts" else None
    confidence = "theory" if args.ucb_mode == "theory" else args.ucb_multiplier
    ridge = ucb_start(2 * d, bounds, confidence=confidence, R=args.R, S=args.S,
                      x_max=args.x_max, delta=args.delta)
    alpha, beta = env.theta[:d], env.theta[d:]
    for t in range(T):
        x = env.X[t]
        if t < forced.size:
            p = float(forced[t])
        elif args.tail == "ts":
            p = ts_choose_price(ts, x, normals[t])
        elif args.tail == "ucb":
            p = ucb_choose_price(ridge, x)
        else:
            p = prior_independent_ts_step(ridge, x, args.prior_free_scale, normals[t])
        D = realize_demand(env.theta, x, p, env.noise[t])
        a, b = float(alpha @ x), float(beta @ x)
        prices[t], demands[t] = p, D
        rev[t] = revenue(a, b, p)
        opt[t] = optimal_price(env.theta, x, bounds)[1]
        if args.tail == "ts":
            if t >= forced.size or args.update_on_forced:
                ts = ts_observe(ts, x, p, D)
        else:
            ridge = ucb_observe(ridge, x, p, D)
    return EpochTrace(env.X, prices, demands, rev, opt)


# ----------------------------------------------------------------------------
# Policy controllers: decide each epoch's plan and absorb its outcome


class _Controller:
    name: str

    def __init__(self, name: str, meta: MetaInstance, settings: RunSettings, base: dict):
        self.name = name
        self.meta = meta
        self.settings = settings
        self.base = base

    def args(self, forced, tail, prior=None, update_on_forced=False, T=None) -> EpochArgs:
        return EpochArgs(forced=np.asarray(forced, dtype=float), tail=tail, prior=prior,
                         update_on_forced=update_on_forced, **self.base)

    def plan(self, i: int, env: EpochEnvironment) -> EpochArgs:
        raise NotImplementedError

    def finish(self, i: int, env: EpochEnvironment, trace: EpochTrace) -> None:
        pass


class _Oracle(_Controller):
    def __init__(self, *a, prior_mean=None, prior_cov=None):
        super().__init__(*a)
        mean = self.meta.prior_mean if prior_mean is None else prior_mean
        cov = self.meta.prior_cov if prior_cov is None else prior_cov
        self.prior = GaussianBelief.from_moments(mean, cov)

    def plan(self, i, env):
        return self.args([init_price(i, self.meta.bounds)], "ts", prior=self.prior,
                         update_on_forced=True)


class _Fixed(_Controller):
    """Round-1 initialisation price, then one prior-independent policy."""

    def __init__(self, *a, tail: str):
        super().__init__(*a)
        self.tail = tail

    def plan(self, i, env):
        return self.args([init_price(i, self.meta.bounds)], self.tail)


class _MetaDP(_Controller):
    def __init__(self, *a, widen: bool, unknown_cov: bool):
        super().__init__(*a)
        self.unknown_cov = unknown_cov
        self.state = MetaState(2 * self.meta.dim, rho=self.settings.rho, widen=widen)
        self.schedule = self.settings.schedule

    def plan(self, i, env):
        st = self.state
        begin_epoch(st)
        assert st.i == i
        p1 = init_price(i, self.meta.bounds)
        x1 = env.X[0]
        record_epoch_initialization(st, make_design_vector(x1, p1),
                                    realize_demand(env.theta, x1, p1, env.noise[0]))
        if self.unknown_cov:
            plan = meta_dp_pp_epoch_plan(st, self.meta, self.schedule)
        else:
            plan = meta_dp_epoch_plan(st, self.meta, self.schedule)
        self._collect = plan.collect_theta
        return self.args(plan.forced_prices, plan.tail, prior=plan.prior)

    def finish(self, i, env, trace):
        if not self._collect:
            return
        n = min(self.schedule.n2, trace.horizon)
        designs = np.hstack([env.X[:n], trace.prices[:n, None] * env.X[:n]])
        try:
            self.state.theta_tildes.append(estimate_epoch_theta(designs, trace.demands[:n]))
        except UnidentifiableError:
            # short replay epochs can cut the forced block before both prices appear
            log.warning("epoch %d: forced rounds do not identify the parameters; skipped", i)
        if i == self.schedule.n1:
            freeze_covariance(self.state, self.schedule)


def make_controller(kind: str, meta: MetaInstance, settings: RunSettings, *, horizon=None,
                    oracle_prior=None) -> _Controller:
    constants = compute_derived_constants(meta)
    T = meta.horizon if horizon is None else horizon
    base = dict(
        bounds=meta.bounds,
        sigma_model=meta.sigma,
        ucb_mode=settings.ucb_mode,
        ucb_multiplier=settings.ucb_multiplier,
        R=constants.R,
        S=meta.S,
        x_max=meta.x_max,
        delta=1.0 / T,
    )
    if kind == ORACLE:
        prior = oracle_prior or (None, None)
        return _Oracle(kind, meta, settings, base, prior_mean=prior[0], prior_cov=prior[1])
    if kind == "prior-free":
        v = settings.prior_free_scale
        if v is None:
            v = oversampling_scale(constants.R, 2 * meta.dim, T, settings.prior_free_delta)
        return _Fixed(kind, meta, settings, dict(base, prior_free_scale=v), tail="prior-free")
    if kind == "ucb-only":
        return _Fixed(kind, meta, settings, base, tail="ucb")
    if kind in ("meta-dp", "greedy", "meta-dp-pp", "greedy-pp"):
        if settings.schedule is None:
            raise InstanceConfigError(f"{kind} needs an exploration schedule")
        constants.require_nondegenerate()
        return _MetaDP(kind, meta, settings, base, widen=not kind.startswith("greedy"),
                       unknown_cov=kind.endswith("-pp"))
    raise InstanceConfigError(f"unknown policy {kind!r}; expected one of {POLICY_KINDS}")


# ----------------------------------------------------------------------------
# Paired meta runs


@dataclass
class TrialResult:
    """Per-epoch meta regret of each policy in one trial."""

    trial: int
    epoch_regret: dict[str, np.ndarray]
    env_log: list | None = None
    extras: dict = field(default_factory=dict)

    def cumulative(self, policy: str) -> np.ndarray:
        return np.cumsum(self.epoch_regret[policy])


def run_meta_paired(meta: MetaInstance, policies: Sequence[str], seed_plan: SeedPlan,
                    trial: int = 0, settings: RunSettings | None = None,
                    environment: Callable[[int, int], EpochEnvironment] | None = None,
                    n_epochs: int | None = None, keep_env_log: bool = False,
                    oracle_prior=None, horizons: Sequence[int] | None = None,
                    on_epoch: Callable | None = None) -> TrialResult:
    """One trial: every policy and the meta oracle on identical environment streams.

    Epoch ``i`` regret is oracle expected revenue minus policy expected revenue.
    """
    settings = settings or RunSettings()
    env_fn = environment or SyntheticEnvironment(meta, seed_plan)
    N = meta.n_epochs if n_epochs is None else n_epochs
    kinds = [ORACLE] + [p for p in policies if p != ORACLE]
    ctrls = {k: make_controller(k, meta, settings, oracle_prior=oracle_prior) for k in kinds}
    regret = {p: np.zeros(N) for p in policies}
    env_log = [] if keep_env_log else None
    dim2 = 2 * meta.dim
    for i in range(1, N + 1):
        env = env_fn(trial, i)
        if keep_env_log:
            env_log.append(env)
        totals = {}
        for k, ctrl in ctrls.items():
            args = ctrl.plan(i, env)
            normals = seed_plan.decision(trial, i, k).standard_normal((env.horizon, dim2))
            trace = run_epoch(args, env, normals, engine=settings.engine)
            ctrl.finish(i, env, trace)
            totals[k] = float(np.sum(trace.revenue))
            if on_epoch is not None:
                on_epoch(k, i, env, trace)
        for p in policies:
            regret[p][i - 1] = totals[ORACLE] - totals[p]
    extras = {}
    for k, ctrl in ctrls.items():
        if isinstance(ctrl, _MetaDP) and ctrl.state.frozen_cov is not None:
            extras[f"{k}/frozen_cov"] = np.array(ctrl.state.frozen_cov)
    return TrialResult(trial, regret, env_log, extras)


@dataclass(frozen=True)
class MetaRegretCurve:
    """Cumulative meta regret per epoch, averaged over trials."""

    policy: str
    mean: np.ndarray
    stderr: np.ndarray
    trials: int

    @property
    def n_epochs(self) -> int:
        return self.mean.size


def aggregate_trials(curves, policy: str = "") -> MetaRegretCurve:
    """Mean and standard error across trials of cumulative regret curves.

    A single trial gets standard error 0.
    """
    curves = [np.asarray(c, dtype=float) for c in curves]
    if not curves:
        raise ValueError("no trials to aggregate")
    n = {c.size for c in curves}
    if len(n) != 1:
        raise ValueError(f"curves have mismatched epoch counts {sorted(n)}")
    M = np.vstack(curves)
    mean = M.mean(axis=0)
    if M.shape[0] == 1:
        se = np.zeros_like(mean)
    else:
        se = M.std(axis=0, ddof=1) / math.sqrt(M.shape[0])
    return MetaRegretCurve(policy, mean, se, M.shape[0])


def _trial_worker(payload):
    meta, policies, master, trial, settings = payload
    return run_meta_paired(meta, policies, SeedPlan(master), trial, settings)


def run_trials(meta: MetaInstance, policies: Sequence[str], seed_plan: SeedPlan, trials: int,
               settings: RunSettings | None = None, workers: int = 1) -> list[TrialResult]:
    """Independent trials, optionally across processes; results ordered by trial."""
    settings = settings or RunSettings()
    payloads = [(meta, list(policies), seed_plan.master_seed, k, settings) for k in range(trials)]
    if workers <= 1:
        return [_trial_worker(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_trial_worker, payloads))
    return sorted(results, key=lambda r: r.trial)


def curves_from_trials(results: Sequence[TrialResult], policies: Sequence[str]) -> dict:
    return {p: aggregate_trials([r.cumulative(p) for r in results], policy=p) for p in policies}


def default_settings(meta: MetaInstance, policies: Sequence[str], exploration: str = "practical",
                     **kw) -> RunSettings:
    """Settings with a schedule resolved for the requested policies."""
    schedule = None
    if any(p in ("meta-dp", "greedy", "meta-dp-pp", "greedy-pp") for p in policies):
        need_pp = any(p.endswith("-pp") for p in policies)
        overrides = {k: kw.pop(k) for k in ("n0", "n1", "n2", "correction", "alternate_n0")
                     if k in kw}
        schedule = resolve_schedule(meta, compute_derived_constants(meta), mode=exploration,
                                    rho=kw.get("rho", 1.0), need_pp=need_pp, **overrides)
    return RunSettings(schedule=schedule, **kw)
