"""Acceptance criteria, one marker per criterion; see conftest for the summary lines.

Run alone with ``pytest tests/test_acceptance.py``; the fig1 and fig3 runs take a
few minutes on one core.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from numba import njit

from metapricing.core_model import (
    MetaInstance,
    PriceBounds,
    UniformBoxFeatures,
    compute_derived_constants,
    make_design_vector,
    optimal_price,
)
from metapricing.experiment import cli
from metapricing.experiment.config import preset
from metapricing.gaussian import GaussianBelief, posterior_update
from metapricing.meta_learner import (
    MetaState,
    begin_epoch,
    covariance_error_bound,
    estimate_prior_mean,
    record_epoch_initialization,
)
from metapricing.policies import init_price
from metapricing.simulator import SeedPlan, curves_from_trials, default_settings, run_trials

TESTS = Path(__file__).resolve().parent
criterion = pytest.mark.criterion


def run_preset(name, trials=None, seed=None):
    cfg = preset(name)
    if trials is not None or seed is not None:
        cfg = cfg.with_overrides(trials=trials, seed=seed)
    meta = cfg.meta_instance()
    pols = cfg.simulator_policies()
    settings = default_settings(meta, pols, rho=cfg.rho, ucb_mode=cfg.ucb_mode)
    t0 = time.perf_counter()
    results = run_trials(meta, pols, SeedPlan(cfg.seed), cfg.trials, settings)
    wall = time.perf_counter() - t0
    return dict(meta=meta, settings=settings, results=results, wall=wall,
                curves=curves_from_trials(results, pols))


@pytest.fixture(scope="module")
def fig1():
    return run_preset("fig1")


@pytest.fixture(scope="module")
def fig3():
    return run_preset("fig3")


def tail_slope(curve):
    N = curve.size
    i = np.arange(N // 2, N) + 1
    return float(np.polyfit(np.log(i), np.log(curve[N // 2:]), 1)[0])


# -- 1 ------------------------------------------------------------------------


@njit(cache=True)
def grid_best(a, b, lo, hi, n):
    out = np.empty(a.size)
    for k in range(a.size):
        best = -np.inf
        for j in range(n):
            p = lo[k] + (hi[k] - lo[k]) * (j / (n - 1))
            best = max(best, a[k] * p + b[k] * p * p)
        out[k] = best
    return out


@criterion(1, "price oracle matches a 1e5-point grid on 1e4 instances (< 10 s)")
def test_price_oracle_equivalence():
    grid_best(np.zeros(1), np.zeros(1), np.ones(1), np.ones(1), 2)  # compile outside the clock
    rng = np.random.default_rng(20)
    n = 10_000
    t0 = time.perf_counter()
    rows = []
    for _ in range(n):
        d = int(rng.integers(1, 6))
        theta, x = rng.normal(size=2 * d), rng.uniform(0, 1, d)
        lo = rng.uniform(0.01, 2.0)
        hi = lo + rng.uniform(0.0, 3.0)
        p, r = optimal_price(theta, x, PriceBounds(lo, hi))
        assert lo <= p <= hi
        rows.append((theta[:d] @ x, theta[d:] @ x, lo, hi, r))
    a, b, lo, hi, r = (np.array(c) for c in zip(*rows))
    best = grid_best(a, b, lo, hi, 100_000)
    elapsed = time.perf_counter() - t0
    assert np.max(np.abs(r - best)) <= 1e-6
    assert elapsed < 10.0, f"{elapsed:.1f} s"


# -- 2 ------------------------------------------------------------------------


@criterion(2, "50-step sequential posterior equals batch posterior to 1e-8 (< 5 s)")
def test_conjugacy():
    rng = np.random.default_rng(21)
    t0 = time.perf_counter()
    for _ in range(100):
        n = 2 * int(rng.integers(1, 6))
        A = rng.normal(size=(n, n))
        cov = A @ A.T / n + 0.2 * np.eye(n)
        mean = rng.normal(size=n)
        sigma = rng.uniform(0.3, 2.0)
        M, D = rng.normal(size=(50, n)), rng.normal(size=50)
        b = GaussianBelief.from_moments(mean, cov)
        for m, y in zip(M, D):
            b = posterior_update(b, m, y, sigma)
        P = np.linalg.inv(cov) + M.T @ M / sigma**2
        bc = np.linalg.inv(P)
        bm = bc @ (np.linalg.solve(cov, mean) + M.T @ D / sigma**2)
        assert np.linalg.norm(b.cov - bc, "fro") <= 1e-8
        assert np.linalg.norm(b.mean - bm) <= 1e-8
    assert time.perf_counter() - t0 < 5.0


# -- 3 ------------------------------------------------------------------------


@criterion(3, "prior-mean error slope in [-0.65, -0.35] (d=2, 200 reps, < 2 min)")
def test_prior_mean_rate():
    d, reps = 2, 200
    checkpoints = [64, 128, 256, 512, 1024]
    meta = MetaInstance(1024, 2, 0.1 * np.r_[np.ones(d), -np.ones(d)], 1e-2 * np.eye(2 * d),
                        1.0, PriceBounds(0.1, 1.0), UniformBoxFeatures(d))
    L = np.linalg.cholesky(meta.prior_cov)
    errs = np.empty((reps, len(checkpoints)))
    t0 = time.perf_counter()
    for r in range(reps):
        rng = np.random.default_rng(3000 + r)
        X = meta.features.sample(rng, 1024)
        thetas = meta.prior_mean + rng.standard_normal((1024, 2 * d)) @ L.T
        noise = rng.standard_normal(1024)
        st = MetaState(2 * d)
        designs = []
        for i in range(1, 1025):
            m = make_design_vector(X[i - 1], init_price(i, meta.bounds))
            begin_epoch(st)
            record_epoch_initialization(st, m, float(thetas[i - 1] @ m + noise[i - 1]))
            designs.append(m)
            if i in checkpoints:
                est = estimate_prior_mean(st).theta
                errs[r, checkpoints.index(i)] = np.linalg.norm(est - meta.prior_mean)
        if r == 0:
            # independent route: plain least squares on the stacked round-1 data
            M = np.array(designs)
            y = np.einsum("ij,ij->i", thetas, M) + noise
            direct = np.linalg.lstsq(M, y, rcond=None)[0]
            np.testing.assert_allclose(est, direct, rtol=0, atol=1e-8)
    slope = np.polyfit(np.log(checkpoints), np.log(np.median(errs, axis=0)), 1)[0]
    assert -0.65 <= slope <= -0.35, f"slope {slope:.3f}"
    assert time.perf_counter() - t0 < 120.0


# -- 4 ------------------------------------------------------------------------


@criterion(4, "fig1: Meta-DP <= 0.85 x greedy and <= 0.6 x prior-free; desk ordering >= 8/10")
def test_fig1_meta_dp_vs_greedy(fig1):
    c = fig1["curves"]
    ratio = c["meta-dp"].mean[-1] / c["greedy"].mean[-1]
    assert ratio <= 0.85, f"Meta-DP / greedy = {ratio:.3f}"


@criterion(4, "fig1: Meta-DP <= 0.85 x greedy and <= 0.6 x prior-free; desk ordering >= 8/10")
def test_fig1_meta_dp_vs_prior_free(fig1):
    c = fig1["curves"]
    ratio = c["meta-dp"].mean[-1] / c["prior-free"].mean[-1]
    assert ratio <= 0.6, f"Meta-DP / prior-free = {ratio:.3f}"
    assert fig1["wall"] <= 45 * 60


@criterion(4, "fig1: Meta-DP <= 0.85 x greedy and <= 0.6 x prior-free; desk ordering >= 8/10")
def test_desk_ordering():
    ordered, walls = 0, []
    for seed in range(10):
        run = run_preset("desk", trials=10, seed=seed)
        c = run["curves"]
        walls.append(run["wall"])
        final = [c[p].mean[-1] for p in ("meta-dp", "greedy", "prior-free")]
        ordered += final[0] < final[1] < final[2]
    assert ordered >= 8, f"ordering held in {ordered}/10 reruns"
    assert max(walls) <= 180


# -- 5 ------------------------------------------------------------------------


@criterion(5, "fig1 second-half log-log slope: Meta-DP < 0.9, prior-free > 0.95")
def test_sublinearity(fig1):
    c = fig1["curves"]
    s_meta, s_pf = tail_slope(c["meta-dp"].mean), tail_slope(c["prior-free"].mean)
    assert s_meta < 0.9, f"Meta-DP slope {s_meta:.3f}"
    assert s_pf > 0.95, f"prior-free slope {s_pf:.3f}"


# -- 6 ------------------------------------------------------------------------


@criterion(6, "fig3: Meta-DP++ <= 0.92 x greedy; covariance error below bound in >= 9/10")
def test_fig3_meta_dp_pp_vs_greedy(fig3):
    c = fig3["curves"]
    ratio = c["meta-dp-pp"].mean[-1] / c["greedy-pp"].mean[-1]
    assert ratio <= 0.92, f"Meta-DP++ / greedy = {ratio:.3f}"


@criterion(6, "fig3: Meta-DP++ <= 0.92 x greedy; covariance error below bound in >= 9/10")
def test_fig3_covariance_bound(fig3):
    meta, sched = fig3["meta"], fig3["settings"].schedule
    bound = covariance_error_bound(compute_derived_constants(meta), sched.n1, sched.n2,
                                   meta.lambda_bar, meta.dim,
                                   1.0 / (meta.n_epochs * meta.horizon))
    errs = [np.linalg.norm(r.extras["meta-dp-pp/frozen_cov"] - meta.prior_cov, 2)
            for r in fig3["results"]]
    assert sum(e < bound for e in errs) >= 9, f"errors {errs} vs bound {bound:.3g}"


# -- 7 ------------------------------------------------------------------------


@criterion(7, "same seed gives a byte-identical CSV for any worker count")
@pytest.mark.parametrize("name", ["fig1", "fig2a", "fig2b", "fig3", "desk"])
def test_determinism(name, tmp_path):
    blobs = []
    for k, workers in enumerate((1, 2, 1)):
        out = tmp_path / f"run{k}"
        code = cli.main(["run", "--preset", name, "--trials", "2", "--epochs", "60",
                         "--horizon", "80", "--seed", "5", "--workers", str(workers),
                         "--out", str(out)])
        assert code == 0
        blobs.append((out / f"{name}.csv").read_bytes())
    assert blobs[0] == blobs[1] == blobs[2]


# -- 8 ------------------------------------------------------------------------

PROPERTY_TESTS = [
    "test_gaussian.py::test_update_preserves_pd_and_loewner_order",
    "test_gaussian.py::test_update_is_order_invariant",
    "test_gaussian.py::test_sequential_equals_batch",
    "test_meta_learner.py::test_widened_cov_is_pd",
    "test_meta_learner.py::test_N2_always_even",
    "test_meta_learner.py::test_min_eigenvalue_grows_linearly",
    "test_meta_learner.py::test_records_replay_bit_for_bit",
    "test_core_model.py::test_optimal_price_within_bounds_and_dominates_random_prices",
    "test_policies.py::test_every_policy_respects_price_bounds",
    "test_policies.py::test_gram_min_eigenvalue_nondecreasing",
    "test_engines.py::test_engines_agree",
    "test_simulator.py::test_environment_independent_of_policy_set",
    "test_simulator.py::test_oracle_against_itself_is_exactly_zero",
    "test_simulator.py::test_runs_are_deterministic_across_workers",
    "test_experiment.py::test_config_round_trip",
    "test_experiment.py::test_replay_identity_self_pairing_is_zero",
    "test_experiment.py::test_replay_rejects_zero_permutations",
    "test_experiment.py::test_noiseless_fits_recover_truth",
    "test_experiment.py::test_cli_ingest_then_replay",
    "test_experiment.py::test_cli_run_manifest_matches_recomputation",
]


@criterion(8, "module property suites pass")
def test_property_suites():
    args = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
            *(str(TESTS / t) for t in PROPERTY_TESTS)]
    proc = subprocess.run(args, capture_output=True, text=True, cwd=TESTS.parent)
    tail = "\n".join(proc.stdout.strip().splitlines()[-5:])
    assert proc.returncode == 0, tail
