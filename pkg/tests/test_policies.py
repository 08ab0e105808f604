import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from metapricing.core_model import PriceBounds, make_design_vector, optimal_price
from metapricing.gaussian import GaussianBelief, posterior_update
from metapricing.policies import (
    init_price,
    oversampling_scale,
    prior_free_sample,
    prior_independent_ts_step,
    theory_confidence_multiplier,
    ts_choose_price,
    ts_observe,
    ts_start,
    ucb_choose_price,
    ucb_estimate,
    ucb_objective,
    ucb_observe,
    ucb_start,
)
from metapricing.simulator import EpochArgs, EpochEnvironment, run_epoch

B = PriceBounds(0.1, 1.0)


def interior_theta():
    # a = 1, b = -1 for x = (1,): optimum 0.5
    return np.array([1.0, -1.0])


def random_ridge_state(rng, d, n_obs, bounds=B, confidence=1.0):
    s = ucb_start(2 * d, bounds, confidence=confidence)
    theta = rng.normal(size=2 * d)
    for _ in range(n_obs):
        x = rng.uniform(0, 1, size=d)
        p = rng.uniform(bounds.p_min, bounds.p_max)
        s = ucb_observe(s, x, p, float(theta @ make_design_vector(x, p) + rng.normal()))
    return s


# -- initialisation rule -----------------------------------------------------


def test_init_rule_parity_and_balance():
    assert init_price(2, B) == 0.1 and init_price(3, B) == 1.0
    for start in (1, 2, 7):
        prices = [init_price(i, B) for i in range(start, start + 20)]
        assert prices.count(0.1) == prices.count(1.0) == 10


# -- Thompson sampling -------------------------------------------------------


def test_ts_concentrated_belief_prices_at_oracle():
    s = ts_start(interior_theta(), 1e-12 * np.eye(2), B, 1.0)
    z = np.random.default_rng(0).standard_normal(2)
    assert ts_choose_price(s, [1.0], z) == pytest.approx(0.5, abs=1e-4)


def test_ts_zero_normals_price_mean():
    rng = np.random.default_rng(1)
    mean = rng.normal(size=4)
    s = ts_start(mean, np.eye(4), B, 1.0)
    x = rng.uniform(0, 1, 2)
    assert ts_choose_price(s, x, np.zeros(4)) == optimal_price(mean, x, B)[0]


def test_ts_price_distribution_matches_pushforward():
    rng = np.random.default_rng(2)
    mean = np.array([0.6, 0.3, -0.8, -0.5])
    cov = np.diag([0.02, 0.01, 0.03, 0.02])
    x = np.array([0.6, 0.4])
    s = ts_start(mean, cov, B, 1.0)
    policy = [ts_choose_price(s, x, z) for z in rng.standard_normal((10_000, 4))]
    # independent route: eigen-decomposition sampler and the vectorised vertex rule
    th = np.random.default_rng(3).multivariate_normal(mean, cov, size=10_000, method="eigh")
    a, b = th[:, :2] @ x, th[:, 2:] @ x
    with np.errstate(divide="ignore", invalid="ignore"):
        vertex = np.clip(-a / (2 * b), B.p_min, B.p_max)
    ends = np.where(a * B.p_max + b * B.p_max**2 >= a * B.p_min + b * B.p_min**2, B.p_max, B.p_min)
    direct = np.where(b < 0, vertex, ends)
    assert stats.ks_2samp(policy, direct).pvalue > 0.01


def test_ts_observe_mirrors_posterior_update():
    s = ts_start(np.zeros(2), np.eye(2), B, 1.0)
    s2 = ts_observe(s, [1.0], 0.0, 1.0)  # design (1, 0)
    np.testing.assert_allclose(s2.belief.mean, [0.5, 0.0], atol=1e-15)
    np.testing.assert_allclose(s2.belief.cov, np.diag([0.5, 1.0]), atol=1e-15)
    assert s2.t == s.t + 1
    ref = posterior_update(s.belief, make_design_vector([1.0], 0.7), 0.3, 1.0)
    np.testing.assert_array_equal(ts_observe(s, [1.0], 0.7, 0.3).belief.cov, ref.cov)


def test_ts_noiseless_identification():
    rng = np.random.default_rng(4)
    theta = rng.normal(size=6)
    s = ts_start(np.zeros(6), np.eye(6), B, 1e-6)
    for _ in range(40):
        x = rng.uniform(0, 1, 3)
        p = rng.uniform(0.1, 1.0)
        s = ts_observe(s, x, p, float(theta @ make_design_vector(x, p)))
    np.testing.assert_allclose(s.belief.mean, theta, atol=1e-6)


def test_ts_noiseless_regret_vanishes():
    rng = np.random.default_rng(5)
    d, T = 2, 500
    theta = np.array([0.9, 0.6, -1.0, -0.8])
    env = EpochEnvironment(theta, rng.uniform(0.2, 1.0, size=(T, d)), np.zeros(T))
    prior = GaussianBelief.from_moments(theta + 0.01, 1e-4 * np.eye(4))
    args = EpochArgs(forced=np.array([1.0]), tail="ts", bounds=B, prior=prior,
                     sigma_model=1e-3, update_on_forced=True)
    trace = run_epoch(args, env, rng.standard_normal((T, 4)), engine="python")
    gaps = trace.oracle_revenue - trace.revenue
    assert np.all(gaps >= -1e-12)
    assert gaps[-100:].mean() <= 1e-3


# -- ridge / UCB -------------------------------------------------------------


def test_ucb_estimate_examples():
    s = ucb_start(2, B)
    np.testing.assert_array_equal(ucb_estimate(s).theta, [0.0, 0.0])
    s = replace(s, gram=s.gram + np.outer([1, 0], [1, 0]), moment=np.array([1.0, 0.0]))
    np.testing.assert_allclose(ucb_estimate(s).theta, [0.5, 0.0], atol=1e-15)


def test_ucb_estimate_matches_direct_ridge():
    rng = np.random.default_rng(6)
    theta = rng.normal(size=4)
    s = ucb_start(4, B)
    M = []
    for _ in range(200):
        x, p = rng.uniform(0, 1, 2), rng.uniform(0.1, 1.0)
        s = ucb_observe(s, x, p, float(theta @ make_design_vector(x, p)))
        M.append(make_design_vector(x, p))
    M = np.array(M)
    direct = np.linalg.lstsq(np.vstack([M, np.eye(4)]), np.r_[M @ theta, np.zeros(4)], rcond=None)[0]
    np.testing.assert_allclose(ucb_estimate(s).theta, direct, atol=1e-9)
    assert np.linalg.norm(ucb_estimate(s).theta - theta) <= 5 * np.linalg.norm(theta) / np.linalg.eigvalsh(s.gram)[0]


def test_ucb_zero_multiplier_is_greedy():
    rng = np.random.default_rng(7)
    s = random_ridge_state(rng, 2, 30, confidence=0.0)
    x = rng.uniform(0, 1, 2)
    assert ucb_choose_price(s, x) == optimal_price(ucb_estimate(s), x, B)[0]


def test_ucb_identity_gram_bonus_and_grid_oracle():
    s = replace(ucb_start(2, B), moment=np.array([1.0, -1.0]))
    grid = np.linspace(B.p_min, B.p_max, 100_000)
    obj = ucb_objective(s, [1.0], grid)
    np.testing.assert_allclose(obj, grid - grid**2 + np.sqrt(1 + grid**2), atol=1e-12)
    p = ucb_choose_price(s, [1.0])
    assert ucb_objective(s, [1.0], p) >= obj.max() - 1e-6


def test_ucb_zero_estimate_prefers_upper_bound():
    s = ucb_start(4, B)
    assert ucb_choose_price(s, np.array([0.3, 0.4])) == B.p_max


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 5.0))
@settings(max_examples=60, deadline=None)
def test_ucb_choice_matches_dense_grid(seed, w):
    rng = np.random.default_rng(seed)
    s = random_ridge_state(rng, 2, int(rng.integers(0, 25)), confidence=w)
    x = rng.uniform(0, 1, 2)
    grid = np.linspace(B.p_min, B.p_max, 100_000)
    p = ucb_choose_price(s, x)
    assert B.p_min <= p <= B.p_max
    assert float(ucb_objective(s, x, p)) >= ucb_objective(s, x, grid).max() - 1e-6


def test_gram_min_eigenvalue_nondecreasing():
    rng = np.random.default_rng(8)
    s = ucb_start(6, B)
    prev = np.linalg.eigvalsh(s.gram)[0]
    for _ in range(300):
        s = ucb_observe(s, rng.uniform(0, 1, 3), rng.uniform(0.1, 1.0), rng.normal())
        cur = np.linalg.eigvalsh(s.gram)[0]
        assert cur >= prev - 1e-12
        prev = cur


def test_theory_multiplier_formula():
    w = theory_confidence_multiplier(10, 4, 1.5, 0.3, 1.0, 1.0, 0.01)
    assert w == pytest.approx(1.5 * math.sqrt(8 * math.log((1 + 10 * 2) / 0.01)) + 0.3)
    s = replace(ucb_start(4, B, confidence="theory", R=1.5, S=0.3, x_max=1.0, delta=0.01), n_obs=10)
    assert s.multiplier() == pytest.approx(w)


# -- prior-independent TS ----------------------------------------------------


def test_oversampling_scale_default_delta():
    assert oversampling_scale(1.2, 10, 1000) == pytest.approx(1.2 * math.sqrt(90 * math.log(1e6)))


def test_prior_free_zero_scale_is_greedy_ridge():
    rng = np.random.default_rng(9)
    s = random_ridge_state(rng, 2, 20)
    x = rng.uniform(0, 1, 2)
    p = prior_independent_ts_step(s, x, 0.0, rng.standard_normal(4))
    assert p == optimal_price(ucb_estimate(s), x, B)[0]


def test_prior_free_huge_gram_concentrates():
    theta = np.array([0.8, -1.0])
    s = replace(ucb_start(2, B), gram=1e6 * np.eye(2), moment=1e6 * theta)
    rng = np.random.default_rng(10)
    draws = np.array([prior_free_sample(s, 1.0, z).theta for z in rng.standard_normal((200, 2))])
    assert np.max(np.abs(draws - theta)) < 1e-2
    prices = [prior_independent_ts_step(s, [1.0], 1.0, z) for z in rng.standard_normal((50, 2))]
    assert np.ptp(prices) < 1e-2


def test_prior_free_sample_covariance():
    rng = np.random.default_rng(11)
    s = random_ridge_state(rng, 2, 15)
    v = 2.5
    Z = rng.standard_normal((20_000, 4))
    draws = np.array([prior_free_sample(s, v, z).theta for z in Z])
    target = v**2 * np.linalg.inv(s.gram)
    assert np.linalg.norm(np.cov(draws, rowvar=False) - target) <= 0.05 * np.linalg.norm(target)
    np.testing.assert_allclose(draws.mean(axis=0), np.linalg.solve(s.gram, s.moment),
                               atol=5 * math.sqrt(np.max(np.diag(target)) / 20_000))


@pytest.mark.parametrize("tail", ["ts", "ucb", "prior-free"])
def test_every_policy_respects_price_bounds(tail):
    rng = np.random.default_rng(12)
    T, d = 200, 3
    theta = rng.normal(size=2 * d)
    env = EpochEnvironment(theta, rng.uniform(0, 1, (T, d)), rng.normal(size=T))
    bounds = PriceBounds(0.3, 0.9)
    args = EpochArgs(forced=np.array([0.3]), tail=tail, bounds=bounds,
                     prior=GaussianBelief.from_moments(np.zeros(2 * d), np.eye(2 * d)),
                     prior_free_scale=3.0)
    for engine in ("python", "numba"):
        tr = run_epoch(args, env, rng.standard_normal((T, 2 * d)), engine=engine)
        assert np.all((tr.prices >= 0.3) & (tr.prices <= 0.9))
