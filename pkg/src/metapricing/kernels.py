"""Compiled epoch loops used by the simulator.

An epoch is a forced price prefix (the round-1 initialisation price, or the
p_min/p_max exploration block) followed by one adaptive tail policy. All
randomness comes in as pre-drawn arrays so the loops are pure functions.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

TAIL_TS = 0
TAIL_UCB = 1
TAIL_PRIOR_FREE = 2

CONF_FIXED = 0
CONF_THEORY = 1

UCB_GRID = 2048
REFINE_TOL = 1e-9
CHOL_JITTER = 1e-12


@njit(cache=True)
def _chol(A, L):
    """Lower Cholesky factor into ``L``; returns False on a non-positive pivot."""
    n = A.shape[0]
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            r = A[i, j]
            for k in range(j):
                r -= L[i, k] * L[j, k]
            L[i, j] = r / L[j, j]
        for i in range(j):
            L[i, j] = 0.0
    return True


@njit(cache=True)
def _chol_jittered(A, L):
    if _chol(A, L):
        return
    n = A.shape[0]
    scale = 0.0
    for i in range(n):
        scale += abs(A[i, i])
    scale = max(scale / n, 1e-300)
    B = A.copy()
    jitter = CHOL_JITTER * scale
    while True:
        for i in range(n):
            B[i, i] = A[i, i] + jitter
        if _chol(B, L):
            return
        jitter *= 10.0


@njit(cache=True)
def _forward(L, b, out):
    n = L.shape[0]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]


@njit(cache=True)
def _backward(L, b, out):
    # solves L^T out = b
    n = L.shape[0]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]


@njit(cache=True)
def optimal_price_ab(a, b, p_min, p_max):
    if b < 0.0:
        p = -a / (2.0 * b)
        if p < p_min:
            p = p_min
        if p > p_max:
            p = p_max
        return p
    if a * p_max + b * p_max * p_max >= a * p_min + b * p_min * p_min:
        return p_max
    return p_min


@njit(cache=True)
def _ucb_value(p, a, b, w, q0, q1, q2):
    q = q0 + q1 * p + q2 * p * p
    if q < 0.0:
        q = 0.0
    return a * p + b * p * p + w * math.sqrt(q)


@njit(cache=True)
def ucb_maximize(a, b, w, q0, q1, q2, p_min, p_max):
    if p_min == p_max:
        return p_min
    ps = np.linspace(p_min, p_max, UCB_GRID)
    vals = np.empty(UCB_GRID)
    for k in range(UCB_GRID):
        vals[k] = _ucb_value(ps[k], a, b, w, q0, q1, q2)
    best_p = p_max
    best_v = vals[UCB_GRID - 1]
    for k in range(UCB_GRID):
        left = vals[k - 1] if k > 0 else -np.inf
        right = vals[k + 1] if k + 1 < UCB_GRID else -np.inf
        if not (vals[k] >= left and vals[k] >= right):
            continue
        lo = ps[max(k - 1, 0)]
        hi = ps[min(k + 1, UCB_GRID - 1)]
        while hi - lo > REFINE_TOL:
            m1 = lo + (hi - lo) / 3
            m2 = hi - (hi - lo) / 3
            if _ucb_value(m1, a, b, w, q0, q1, q2) < _ucb_value(m2, a, b, w, q0, q1, q2):
                lo = m1
            else:
                hi = m2
        for c in range(2):
            cand = ps[k] if c == 0 else 0.5 * (lo + hi)
            v = _ucb_value(cand, a, b, w, q0, q1, q2)
            if v > best_v or (v == best_v and cand > best_p):
                best_p = cand
                best_v = v
    return best_p


@njit(cache=True)
def epoch_kernel(
    X, noise, theta, Z, forced, tail,
    mean0, cov0, sigma_model, update_on_forced,
    p_min, p_max,
    conf_mode, w_fixed, R, S, x_max, delta, v,
):
    """Run one epoch; returns (prices, demands, expected revenue, oracle revenue)."""
    T, d = X.shape
    n = 2 * d
    prices = np.empty(T)
    demands = np.empty(T)
    rev = np.empty(T)
    opt_rev = np.empty(T)

    mean = mean0.copy()
    cov = cov0.copy()
    gram = np.eye(n)
    moment = np.zeros(n)
    L = np.zeros((n, n))
    m = np.empty(n)
    g = np.empty(n)
    u = np.empty(n)
    tmp = np.empty(n)
    th = np.empty(n)
    e = np.zeros(n)
    Vinv = np.empty((n, n))
    L2 = np.zeros((n, n))
    n_forced = forced.shape[0]
    n_obs = 0

    for t in range(T):
        x = X[t]
        a_true = 0.0
        b_true = 0.0
        for k in range(d):
            a_true += theta[k] * x[k]
            b_true += theta[d + k] * x[k]

        if t < n_forced:
            p = forced[t]
        elif tail == TAIL_TS:
            _chol_jittered(cov, L)
            for i in range(n):
                s = mean[i]
                for k in range(i + 1):
                    s += L[i, k] * Z[t, k]
                th[i] = s
            a = 0.0
            b = 0.0
            for k in range(d):
                a += th[k] * x[k]
                b += th[d + k] * x[k]
            p = optimal_price_ab(a, b, p_min, p_max)
        else:
            _chol_jittered(gram, L)
            _forward(L, moment, tmp)
            _backward(L, tmp, th)
            if tail == TAIL_UCB:
                if conf_mode == CONF_THEORY:
                    w = R * math.sqrt(
                        2 * n * math.log((1 + n_obs * x_max * x_max * (1 + p_max * p_max)) / delta)
                    ) + S
                else:
                    w = w_fixed
                a = 0.0
                b = 0.0
                for k in range(d):
                    a += th[k] * x[k]
                    b += th[d + k] * x[k]
                if w == 0.0:
                    p = optimal_price_ab(a, b, p_min, p_max)
                else:
                    for k in range(n):
                        m[k] = 0.0
                    for k in range(d):
                        m[k] = x[k]
                    _forward(L, m, u)
                    for k in range(d):
                        m[k] = 0.0
                        m[d + k] = x[k]
                    _forward(L, m, g)
                    q0 = 0.0
                    q1 = 0.0
                    q2 = 0.0
                    for k in range(n):
                        q0 += u[k] * u[k]
                        q1 += u[k] * g[k]
                        q2 += g[k] * g[k]
                    p = ucb_maximize(a, b, w, q0, 2.0 * q1, q2, p_min, p_max)
            else:
                # gram^{-1} column by column, then its own factor
                for j in range(n):
                    for k in range(n):
                        e[k] = 0.0
                    e[j] = 1.0
                    _forward(L, e, tmp)
                    _backward(L, tmp, u)
                    for k in range(n):
                        Vinv[k, j] = u[k]
                for i in range(n):
                    for j in range(i):
                        s = 0.5 * (Vinv[i, j] + Vinv[j, i])
                        Vinv[i, j] = s
                        Vinv[j, i] = s
                _chol_jittered(Vinv, L2)
                for i in range(n):
                    s = 0.0
                    for k in range(i + 1):
                        s += L2[i, k] * Z[t, k]
                    tmp[i] = th[i] + v * s
                a = 0.0
                b = 0.0
                for k in range(d):
                    a += tmp[k] * x[k]
                    b += tmp[d + k] * x[k]
                p = optimal_price_ab(a, b, p_min, p_max)

        D = a_true + p * b_true + noise[t]
        prices[t] = p
        demands[t] = D
        rev[t] = a_true * p + b_true * p * p
        p_star = optimal_price_ab(a_true, b_true, p_min, p_max)
        opt_rev[t] = a_true * p_star + b_true * p_star * p_star

        for k in range(d):
            m[k] = x[k]
            m[d + k] = p * x[k]
        if tail == TAIL_TS:
            if t >= n_forced or update_on_forced:
                s = sigma_model * sigma_model
                r = D
                for i in range(n):
                    acc = 0.0
                    for k in range(n):
                        acc += cov[i, k] * m[k]
                    g[i] = acc
                    s += m[i] * acc
                    r -= m[i] * mean[i]
                for i in range(n):
                    for j in range(i + 1):
                        c = 0.5 * ((cov[i, j] - g[i] * g[j] / s) + (cov[j, i] - g[j] * g[i] / s))
                        cov[i, j] = c
                        cov[j, i] = c
                for i in range(n):
                    mean[i] += g[i] * (r / s)
        else:
            for i in range(n):
                moment[i] += D * m[i]
                for j in range(n):
                    gram[i, j] += m[i] * m[j]
            n_obs += 1

    return prices, demands, rev, opt_rev
