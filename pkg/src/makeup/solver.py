"""Penalized generalized-linear solver shared by every fitting step.

All empirical-risk problems in the package reduce to

    minimize_b  c'b + sum_i w_i {G(x_i'b + o_i) - y_i (x_i'b + o_i)}
                + lam * sum_j f_j |b_j|

for a mean function g with antiderivative G (identity, logistic or
exponential), fixed linear term c, offsets o and penalty factors f. Factor 0
leaves a coordinate unpenalized (intercepts).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

logger = logging.getLogger(__name__)

LINKS = {"identity": K.IDENTITY, "logistic": K.LOGISTIC, "exponential": K.EXPONENTIAL}


class SolverError(RuntimeError):
    """Base class for solver failures."""


class DivergenceError(SolverError):
    """The objective is unbounded below along some direction."""

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


# ---------------------------------------------------------------------------
# link functions (vectorized, used outside the kernels)
# ---------------------------------------------------------------------------

def expit(u):
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def link_mean(link, u):
    """Mean function g(u)."""
    if link == "identity":
        return np.asarray(u, dtype=float)
    if link == "logistic":
        return expit(u)
    if link == "exponential":
        return np.exp(u)
    raise ValueError(f"unknown link {link!r}")


def link_antiderivative(link, u):
    """G(u) = integral of g from 0 to u, shifted so that G is finite at 0."""
    u = np.asarray(u, dtype=float)
    if link == "identity":
        return 0.5 * u**2
    if link == "logistic":
        return np.logaddexp(0.0, u)
    if link == "exponential":
        return np.exp(u)
    raise ValueError(f"unknown link {link!r}")


def link_derivative(link, u):
    """Derivative of the mean function, g'(u)."""
    u = np.asarray(u, dtype=float)
    if link == "identity":
        return np.ones_like(u)
    if link == "logistic":
        m = expit(u)
        return m * (1.0 - m)
    if link == "exponential":
        return np.exp(u)
    raise ValueError(f"unknown link {link!r}")


def link_inverse(link, mu):
    mu = np.asarray(mu, dtype=float)
    if link == "identity":
        return mu
    if link == "logistic":
        return np.log(mu) - np.log1p(-mu)
    if link == "exponential":
        return np.log(mu)
    raise ValueError(f"unknown link {link!r}")


# ---------------------------------------------------------------------------
# problem description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SparseCoef:
    """Coefficient vector; ``support`` is derived, so it is always exact."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.array(self.values, dtype=float).ravel())

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.values)

    @property
    def dimension(self) -> int:
        return self.values.shape[0]

    def __len__(self):
        return self.dimension

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros(d))


@dataclass(frozen=True)
class GlmLoss:
    """Weighted GLM loss with optional linear term, offsets and responses.

    The fixed linear term may be given aggregated (``linear_term``) or as
    per-row contributions ``linear_rows`` with weights ``linear_weights``;
    only the row form can be split for cross-validation.
    """

    link: str
    y: np.ndarray | None = None
    weights: np.ndarray | None = None
    offset: np.ndarray | None = None
    linear_term: np.ndarray | None = None
    linear_rows: np.ndarray | None = None
    linear_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}; expected one of {sorted(LINKS)}")
        if (self.linear_rows is None) != (self.linear_weights is None):
            raise ValueError("linear_rows and linear_weights go together")

    def total_linear(self, d):
        c = np.zeros(d)
        if self.linear_term is not None:
            c += np.asarray(self.linear_term, dtype=float)
        if self.linear_rows is not None:
            c += np.asarray(self.linear_rows, dtype=float).T @ np.asarray(self.linear_weights, dtype=float)
        return c

    def arrays(self, n, d):
        y = np.zeros(n) if self.y is None else np.asarray(self.y, dtype=float)
        w = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float)
        off = np.zeros(n) if self.offset is None else np.asarray(self.offset, dtype=float)
        for name, arr in (("y", y), ("weights", w), ("offset", off)):
            if arr.shape != (n,):
                raise ValueError(f"{name} has shape {arr.shape}, design has {n} rows")
        if np.any(w < 0):
            raise ValueError("sample weights must be non-negative")
        c = self.total_linear(d)
        return y, w, off, c

    def value(self, design, beta):
        """Unpenalized objective."""
        X = np.asarray(design, dtype=float)
        y, w, off, c = self.arrays(X.shape[0], X.shape[1])
        eta = X @ beta + off
        return float(c @ beta + w @ (link_antiderivative(self.link, eta) - y * eta))

    def gradient(self, design, beta):
        X = np.asarray(design, dtype=float)
        y, w, off, c = self.arrays(X.shape[0], X.shape[1])
        eta = X @ beta + off
        return c + X.T @ (w * (link_mean(self.link, eta) - y))


@dataclass(frozen=True)
class PenaltySpec:
    lam: float
    factors: np.ndarray | None = None

    def resolved(self, d):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        f = np.ones(d) if self.factors is None else np.asarray(self.factors, dtype=float)
        if f.shape != (d,):
            raise ValueError(f"penalty factors have length {f.shape[0]}, expected {d}")
        if np.any(f < 0):
            raise ValueError("penalty factors must be non-negative")
        return self.lam * f


def intercept_factors(d, unpenalized=(0,)):
    f = np.ones(d)
    f[list(unpenalized)] = 0.0
    return f


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 10_000
    tol: float = 1e-8
    kkt_tol: float = 1e-7
    max_inner: int = 2_000
    init: np.ndarray | None = None

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class PenalizedFit:
    coef: SparseCoef
    converged: bool
    n_iter: int
    kkt_residual: float
    objective: float
    history: np.ndarray = field(repr=False)

    @property
    def values(self):
        return self.coef.values


def kkt_residual(grad, beta, lam_vec):
    """Largest violation of the lasso optimality conditions."""
    active = beta != 0
    res = np.zeros_like(beta)
    res[active] = np.abs(grad[active] + lam_vec[active] * np.sign(beta[active]))
    res[~active] = np.maximum(np.abs(grad[~active]) - lam_vec[~active], 0.0)
    return float(res.max()) if res.size else 0.0


def _prepare(design, loss):
    X = np.asfortranarray(design, dtype=float)
    if X.ndim != 2:
        raise ValueError("design must be a 2-d array")
    if not np.all(np.isfinite(X)):
        raise ValueError("design has non-finite entries")
    n, d = X.shape
    y, w, off, c = loss.arrays(n, d)
    for name, arr in (("y", y), ("weights", w), ("offset", off), ("linear term", c)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} has non-finite entries")
    return X, y, w, off, c


def solve_penalized(design, loss: GlmLoss, penalty: PenaltySpec,
                    config: SolverConfig | None = None) -> PenalizedFit:
    """Minimize the penalized objective by proximal Newton / coordinate descent.

    Raises
    ------
    DivergenceError
        When the objective is unbounded below (for example an exponential
        link with no penalty on data separable in some direction).
    """
    config = config or SolverConfig()
    X, y, w, off, c = _prepare(design, loss)
    n, d = X.shape
    lam_vec = penalty.resolved(d)
    beta0 = np.zeros(d) if config.init is None else np.array(config.init, dtype=float)
    link = LINKS[loss.link]
    beta, n_iter, status, history = K.prox_newton(
        X, y, w, off, c, link, lam_vec, beta0, config.max_iter, config.tol, config.max_inner
    )
    if status == K.STATUS_DIVERGED:
        j = int(np.argmax(np.abs(beta))) if d else None
        raise DivergenceError(
            f"{loss.link} objective appears unbounded below; coefficient {j} ran off "
            f"(|b_j| = {abs(beta[j]):.3g}) after {n_iter} iterations",
            direction=j,
        )
    grad = K.gradient(X, y, w, off, c, link, beta)
    kkt = kkt_residual(grad, beta, lam_vec)
    converged = status == K.STATUS_CONVERGED or (
        status == K.STATUS_STALLED and kkt <= config.kkt_tol
    )
    if not converged:
        warnings.warn(
            f"solver stopped after {n_iter} iterations without converging "
            f"(KKT residual {kkt:.3g})",
            RuntimeWarning,
            stacklevel=2,
        )
    return PenalizedFit(
        coef=SparseCoef(beta),
        converged=bool(converged),
        n_iter=int(n_iter),
        kkt_residual=kkt,
        objective=float(history[-1]),
        history=np.asarray(history),
    )


def lambda_max(design, loss: GlmLoss, factors=None, config=None):
    """Smallest lambda at which every penalized coordinate is zero."""
    X = np.asarray(design, dtype=float)
    d = X.shape[1]
    f = np.ones(d) if factors is None else np.asarray(factors, dtype=float)
    free = f == 0
    beta = np.zeros(d)
    if free.any():
        sub = solve_penalized(X[:, free], _restrict_linear(loss, free, d), PenaltySpec(0.0), config)
        beta[free] = sub.values
    grad = loss.gradient(X, beta)
    pen = ~free
    if not pen.any():
        return 0.0
    return float(np.max(np.abs(grad[pen]) / f[pen]))


def _restrict_linear(loss, cols, d):
    c = loss.total_linear(d)[cols]
    return GlmLoss(loss.link, y=loss.y, weights=loss.weights, offset=loss.offset,
                   linear_term=c)


def adaptive_factors(pilot, unpenalized=(0,), floor=1e-3):
    """Adaptive-lasso factors 1/max(|pilot_j|, floor); unpenalized stay 0."""
    f = 1.0 / np.maximum(np.abs(np.asarray(pilot, dtype=float)), floor)
    f[list(unpenalized)] = 0.0
    return f


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass
class CvResult:
    lam: float
    lambdas: np.ndarray
    mean_loss: np.ndarray
    se_loss: np.ndarray
    n_skipped: int
    coef: SparseCoef | None = None


def _fold_ids(n, folds, rng, strata=None):
    ids = np.empty(n, dtype=int)
    if strata is None:
        strata = np.zeros(n, dtype=int)
    for s in np.unique(strata):
        idx = np.flatnonzero(strata == s)
        perm = rng.permutation(idx)
        ids[perm] = np.arange(perm.size) % folds
    return ids


def _split_weights(w, keep, strata):
    out = np.where(keep, w, 0.0)
    if strata is None:
        strata = np.zeros(w.shape[0], dtype=int)
    for s in np.unique(strata):
        m = strata == s
        tot, sub = w[m].sum(), out[m].sum()
        if sub > 0:
            out[m] *= tot / sub
    return out


def heldout_loss(design, loss, beta):
    """Unpenalized loss, reported as squared error for the identity link."""
    val = loss.value(design, beta)
    if loss.link == "identity" and loss.y is not None:
        w = np.ones(len(loss.y)) if loss.weights is None else np.asarray(loss.weights)
        val += 0.5 * float(w @ np.asarray(loss.y) ** 2)
    return val


def cross_validate(design, loss: GlmLoss, lambdas, folds=5, seed=0, factors=None,
                   config=None, strata=None, linear_strata=None, refit=False,
                   cv_max_iter=200):
    """K-fold choice of lambda by held-out loss.

    Rows of ``design`` and rows of ``loss.linear_rows`` are assigned to folds
    independently (within ``strata`` / ``linear_strata`` when given); weights
    of the retained rows are rescaled to preserve each stratum's total.

    Each fold walks the grid from the largest penalty down with warm starts
    and stops at the first fit that diverges or exhausts ``cv_max_iter``;
    the remaining (smaller) penalties get no loss for that fold.
    """
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if lambdas.size == 0:
        raise ValueError("lambda grid is empty")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if loss.linear_term is not None:
        raise ValueError("an aggregated linear_term cannot be split into folds; pass linear_rows")
    X = np.asarray(design, dtype=float)
    n, d = X.shape
    rng = np.random.default_rng(seed)
    y, w, off, _ = loss.arrays(n, d)
    ids = _fold_ids(n, folds, rng, strata)
    if loss.linear_rows is not None:
        lw = np.asarray(loss.linear_weights, dtype=float)
        lids = _fold_ids(lw.shape[0], folds, rng, linear_strata)
    order = np.argsort(-lambdas, kind="stable")
    base = config or SolverConfig()
    cv_config = SolverConfig(max_iter=min(base.max_iter, cv_max_iter), tol=base.tol,
                             kkt_tol=base.kkt_tol, max_inner=min(base.max_inner, 500))
    losses = np.full((folds, lambdas.size), np.nan)
    binary = loss.link == "logistic" and loss.y is not None and np.all(np.isin(y, (0.0, 1.0)))
    n_skipped = 0
    skipped = np.zeros(folds, dtype=bool)
    for k in range(folds):
        train, test = ids != k, ids == k
        if binary:
            yt = y[train & (w > 0)]
            if yt.size == 0 or yt.min() == yt.max():
                n_skipped += 1
                skipped[k] = True
                continue
        kw = dict(link=loss.link, y=loss.y, offset=loss.offset)
        tr_kw, te_kw = dict(kw), dict(kw)
        tr_kw["weights"] = _split_weights(w, train, strata)
        te_kw["weights"] = _split_weights(w, test, strata)
        if loss.linear_rows is not None:
            tr_kw.update(linear_rows=loss.linear_rows,
                         linear_weights=_split_weights(lw, lids != k, linear_strata))
            te_kw.update(linear_rows=loss.linear_rows,
                         linear_weights=_split_weights(lw, lids == k, linear_strata))
        tr_loss, te_loss = GlmLoss(**tr_kw), GlmLoss(**te_kw)
        init = None
        for li in order:
            cfg = _with_init(cv_config, init)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    fit = solve_penalized(X, tr_loss, PenaltySpec(lambdas[li], factors), cfg)
            except DivergenceError:
                break
            if not fit.converged:
                # smaller penalties along the path only get harder
                break
            init = fit.values
            losses[k, li] = heldout_loss(X, te_loss, fit.values)
    if n_skipped:
        logger.warning("cross-validation skipped %d fold(s) missing an outcome class", n_skipped)
    used = ~skipped
    if not used.any():
        raise SolverError("cross-validation skipped every fold")
    # a penalty counts only if it was fitted on every usable fold
    valid = ~np.any(np.isnan(losses[used]), axis=0)
    if not valid.any():
        raise SolverError("no penalty in the grid could be fitted on every fold")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.mean(losses[used], axis=0)
        se = np.std(losses[used], axis=0) / np.sqrt(used.sum())
    mean = np.where(valid, mean, np.inf)
    se = np.where(valid, se, np.inf)
    best = int(np.argmin(mean))
    res = CvResult(lam=float(lambdas[best]), lambdas=lambdas, mean_loss=mean,
                   se_loss=se, n_skipped=n_skipped)
    if refit:
        res.coef = solve_penalized(X, loss, PenaltySpec(res.lam, factors), config).coef
    return res


def _with_init(config, init):
    config = config or SolverConfig()
    return SolverConfig(max_iter=config.max_iter, tol=config.tol, kkt_tol=config.kkt_tol,
                        max_inner=config.max_inner, init=init)


def log_grid(lo, hi, num):
    """Descending log-spaced grid from hi to lo."""
    return np.geomspace(hi, lo, num)
