"""Numba kernels for the penalized GLM solver.

Objective handled here::

    F(b) = c'b + sum_i w_i * (G(eta_i) - y_i * eta_i) + sum_j lam_j * |b_j|,
    eta = X b + offset,

with G the antiderivative of the mean function (0 identity, 1 logistic,
2 exponential). Each outer step minimizes the local quadratic model by cyclic
coordinate descent and is accepted through a backtracking line search on F, so
F never increases between outer iterations.
"""

import math

import numpy as np
from numba import njit

IDENTITY = 0
LOGISTIC = 1
EXPONENTIAL = 2

STATUS_CONVERGED = 0
STATUS_MAX_ITER = 1
STATUS_DIVERGED = 2
STATUS_STALLED = 3

# |eta| on a weighted row beyond which a fit is treated as running off to
# infinity (an exponential weight below e^-30 means the row has been dropped)
ETA_LIMIT_LOGISTIC = 40.0
ETA_LIMIT_EXP = 30.0
COEF_LIMIT = 1e8


@njit(cache=True)
def _mean(link, u):
    if link == IDENTITY:
        return u
    if link == LOGISTIC:
        if u >= 0:
            return 1.0 / (1.0 + math.exp(-u))
        e = math.exp(u)
        return e / (1.0 + e)
    return math.exp(u)


@njit(cache=True)
def _antideriv(link, u):
    if link == IDENTITY:
        return 0.5 * u * u
    if link == LOGISTIC:
        if u > 0:
            return u + math.log1p(math.exp(-u))
        return math.log1p(math.exp(u))
    if u > 700.0:
        return np.inf
    return math.exp(u)


@njit(cache=True)
def _curvature(link, u):
    if link == IDENTITY:
        return 1.0
    if link == LOGISTIC:
        m = _mean(LOGISTIC, u)
        return m * (1.0 - m)
    return math.exp(min(u, 700.0))


@njit(cache=True)
def objective(X, y, w, off, c, link, lam, beta):
    n, d = X.shape
    val = 0.0
    for j in range(d):
        val += c[j] * beta[j] + lam[j] * abs(beta[j])
    for i in range(n):
        if w[i] == 0.0:
            continue
        eta = off[i]
        for j in range(d):
            eta += X[i, j] * beta[j]
        val += w[i] * (_antideriv(link, eta) - y[i] * eta)
    return val


@njit(cache=True)
def _smooth_value(y, w, link, eta, c, beta):
    val = 0.0
    for j in range(beta.shape[0]):
        val += c[j] * beta[j]
    for i in range(eta.shape[0]):
        if w[i] == 0.0:
            continue
        val += w[i] * (_antideriv(link, eta[i]) - y[i] * eta[i])
    return val


@njit(cache=True)
def _penalty(lam, beta):
    s = 0.0
    for j in range(beta.shape[0]):
        s += lam[j] * abs(beta[j])
    return s


@njit(cache=True)
def gradient(X, y, w, off, c, link, beta):
    n, d = X.shape
    eta = off.copy()
    for j in range(d):
        bj = beta[j]
        if bj != 0.0:
            for i in range(n):
                eta[i] += X[i, j] * bj
    resid = np.zeros(n)
    for i in range(n):
        if w[i] != 0.0:
            resid[i] = w[i] * (_mean(link, eta[i]) - y[i])
    g = c.copy()
    for j in range(d):
        s = 0.0
        for i in range(n):
            s += X[i, j] * resid[i]
        g[j] += s
    return g


@njit(cache=True)
def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def _cd_sweep(X, v, grad0, H, lam, beta0, bnew, r, cols, n_cols):
    """One cyclic pass over ``cols``; returns the largest coefficient change."""
    n = X.shape[0]
    maxchg = 0.0
    for k in range(n_cols):
        j = cols[k]
        hj = H[j]
        if hj <= 0.0:
            continue
        s = 0.0
        for i in range(n):
            s += v[i] * X[i, j] * r[i]
        gj = grad0[j] + s
        old = bnew[j]
        # quadratic model in b_j: gj*(b-old) + hj/2*(b-old)^2 + lam|b|
        z = hj * old - gj
        new = _soft(z, lam[j]) / hj
        if new != old:
            diff = new - old
            for i in range(n):
                r[i] += X[i, j] * diff
            bnew[j] = new
            chg = abs(diff)
            if chg > maxchg:
                maxchg = chg
    return maxchg


@njit(cache=True)
def prox_newton(X, y, w, off, c, link, lam, beta_init, max_iter, tol,
                max_inner):
    """Proximal Newton with coordinate-descent inner solves.

    Returns (beta, n_iter, status, history) where ``history`` holds the
    objective after every accepted outer step (length n_iter + 1).
    """
    n, d = X.shape
    beta = beta_init.copy()
    eta = off.copy()
    for j in range(d):
        if beta[j] != 0.0:
            for i in range(n):
                eta[i] += X[i, j] * beta[j]
    fval = _smooth_value(y, w, link, eta, c, beta) + _penalty(lam, beta)
    history = np.empty(max_iter + 1)
    history[0] = fval
    v = np.empty(n)
    resid = np.empty(n)
    grad0 = np.empty(d)
    H = np.empty(d)
    r = np.empty(n)
    cols_all = np.arange(d)
    active = np.empty(d, dtype=np.int64)
    status = STATUS_MAX_ITER
    it = 0
    inner_tol = 0.1 * tol
    while it < max_iter:
        for i in range(n):
            if w[i] == 0.0:
                v[i] = 0.0
                resid[i] = 0.0
            else:
                v[i] = w[i] * _curvature(link, eta[i])
                resid[i] = w[i] * (_mean(link, eta[i]) - y[i])
        for j in range(d):
            s = 0.0
            h = 0.0
            for i in range(n):
                xij = X[i, j]
                s += xij * resid[i]
                h += v[i] * xij * xij
            grad0[j] = c[j] + s
            H[j] = h
        # zero-curvature coordinates: move only if that lowers F without bound
        for j in range(d):
            if H[j] <= 1e-300 and abs(grad0[j]) > lam[j] * (1.0 + 1e-12):
                status = STATUS_DIVERGED
        if status == STATUS_DIVERGED:
            break
        bnew = beta.copy()
        for i in range(n):
            r[i] = 0.0
        # inner CD: full sweep, then iterate on the active set, repeat;
        # max_inner caps the total number of sweeps per outer step
        sweeps = 0
        while sweeps < max_inner:
            chg = _cd_sweep(X, v, grad0, H, lam, beta, bnew, r, cols_all, d)
            sweeps += 1
            if chg <= inner_tol:
                break
            n_act = 0
            for j in range(d):
                if bnew[j] != 0.0:
                    active[n_act] = j
                    n_act += 1
            while sweeps < max_inner:
                chg_a = _cd_sweep(X, v, grad0, H, lam, beta, bnew, r,
                                  active, n_act)
                sweeps += 1
                if chg_a <= inner_tol:
                    break
        # directional derivative of F along (bnew - beta)
        D = 0.0
        step_max = 0.0
        for j in range(d):
            dj = bnew[j] - beta[j]
            D += grad0[j] * dj + lam[j] * (abs(bnew[j]) - abs(beta[j]))
            if abs(dj) > step_max:
                step_max = abs(dj)
        if step_max == 0.0:
            status = STATUS_CONVERGED
            break
        t = 1.0
        accepted = False
        trial = np.empty(n)
        bt = np.empty(d)
        while t > 1e-12:
            for i in range(n):
                trial[i] = eta[i] + t * r[i]
            for j in range(d):
                bt[j] = beta[j] + t * (bnew[j] - beta[j])
            ft = _smooth_value(y, w, link, trial, c, bt) + _penalty(lam, bt)
            if ft <= fval + 1e-4 * t * D or ft <= fval - 1e-14 * abs(fval):
                accepted = True
                break
            if D >= 0.0 and ft <= fval:
                accepted = True
                break
            t *= 0.5
        it += 1
        if not accepted:
            history[it] = fval
            status = STATUS_STALLED
            break
        for i in range(n):
            eta[i] = trial[i]
        for j in range(d):
            beta[j] = bt[j]
        fval = ft
        history[it] = fval
        # divergence guards
        bad = False
        for j in range(d):
            if abs(beta[j]) > COEF_LIMIT:
                bad = True
        if link == LOGISTIC:
            for i in range(n):
                if w[i] > 0.0 and abs(eta[i]) > ETA_LIMIT_LOGISTIC:
                    bad = True
                    break
        elif link == EXPONENTIAL:
            for i in range(n):
                if w[i] > 0.0 and abs(eta[i]) > ETA_LIMIT_EXP:
                    bad = True
                    break
        if bad:
            status = STATUS_DIVERGED
            break
        if t * step_max <= tol:
            status = STATUS_CONVERGED
            break
    return beta, it, status, history[: it + 1]


@njit(cache=True)
def cov_lasso(S, rhs, lam, beta_init, max_iter, tol):
    """Coordinate descent on 0.5 b'Sb - rhs'b + sum_j lam_j |b_j|.

    ``S`` must be symmetric positive semi-definite. Returns (beta, n_sweeps,
    converged).
    """
    d = S.shape[0]
    beta = beta_init.copy()
    grad = -rhs.copy()
    for j in range(d):
        if beta[j] != 0.0:
            for k in range(d):
                grad[k] += S[k, j] * beta[j]
    for sweep in range(max_iter):
        maxchg = 0.0
        for j in range(d):
            sjj = S[j, j]
            if sjj <= 0.0:
                continue
            old = beta[j]
            new = _soft(sjj * old - grad[j], lam[j]) / sjj
            if new != old:
                diff = new - old
                for k in range(d):
                    grad[k] += S[k, j] * diff
                beta[j] = new
                if abs(diff) > maxchg:
                    maxchg = abs(diff)
        if maxchg <= tol:
            return beta, sweep + 1, True
    return beta, max_iter, False
