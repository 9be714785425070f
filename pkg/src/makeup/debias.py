"""Doubly robust target fit, one-step debiasing and hard thresholding.

The doubly robust (DR) loss for the target-population model g(x'beta) is

    L(beta) = c'beta + avg_T G(x'beta),
    c = avg_S[x h(z) (b(z) - y)] - avg_T[x b(z)],

where h is the density ratio and b(z) the imputed mean. Its gradient is the
DR estimating function, unbiased when either nuisance is correct.

Each coordinate j of the lasso fit is then corrected by one Newton step along
a node-wise precision row omega_j, with nuisances re-calibrated for that
coordinate so the correction is insensitive to first-order nuisance error.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .data import IDENTITY_BASIS, BasisMap, LabeledPanel
from .nuisance import (CalibratedCorrection, NuisancePair, SubgroupData, _row_params,
                       calibrate_weights, fit_nuisance_pair)
from .solver import (GlmLoss, PenaltySpec, SparseCoef, cross_validate,
                     intercept_factors, link_derivative, link_mean,
                     log_grid, solve_penalized)

logger = logging.getLogger(__name__)

TAU_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


class SingularityError(ArithmeticError):
    """Node-wise residual variance is numerically zero."""


@dataclass
class DrLossContext:
    """Nuisances plugged into the DR loss of one subgroup.

    ``correction`` (optional) switches every row to its sign stratum's
    calibrated parameters.
    """

    subgroup: int
    alpha: np.ndarray
    gamma: np.ndarray
    basis: BasisMap = IDENTITY_BASIS
    g_link: str = "logistic"
    b_link: str = "logistic"
    correction: CalibratedCorrection | None = None

    def pair(self) -> NuisancePair:
        return NuisancePair(SparseCoef(self.alpha), SparseCoef(self.gamma), self.b_link,
                            self.subgroup)


@dataclass
class PrecisionRow:
    j: int
    omega: np.ndarray
    tau_sq: float
    lam: float = 0.0


@dataclass
class DebiasTuning:
    """Penalty levels; ``None`` means choose automatically.

    ``lambda_xi`` / ``lambda_zeta`` are base levels for calibration (default:
    the chosen ``lambda_alpha`` / ``lambda_gamma``); they are rescaled per
    sign stratum by the row-weight magnitude.
    """

    lambda_alpha: float | None = None
    lambda_gamma: float | None = None
    lambda_beta: float | None = None
    lambda_xi: float | None = None
    lambda_zeta: float | None = None
    omega_scale: float = 1.0
    calibrate: bool = True
    g_link: str = "logistic"
    b_link: str = "logistic"
    cv_folds: int = 5
    beta_grid: tuple = (0.05, 2.0, 10)


@dataclass
class DebiasBundle:
    beta_prelim: SparseCoef
    beta_deb: np.ndarray
    beta_deb_uncal: np.ndarray
    precision_rows: list
    corrections: list
    pair: NuisancePair
    tuning: dict
    n_S: int
    n_T: int
    se: np.ndarray = field(repr=False, default=None)
    warnings: list = field(default_factory=list)

    @property
    def n_r(self) -> int:
        return min(self.n_S, self.n_T)

    @property
    def noise_scale(self) -> float:
        """Per-observation noise level: median standard error times sqrt(n_r)."""
        return noise_scale(self.se, self.n_r)


# ---------------------------------------------------------------------------
# DR loss
# ---------------------------------------------------------------------------

def dr_pieces(sub: SubgroupData, a_S, g_S, g_T, b_link="logistic"):
    """Per-row linear-term contributions of the DR loss.

    Returns (rows, weights, strata) with ``c = rows.T @ weights``.
    """
    h = np.exp(a_S)
    bS = link_mean(b_link, g_S)
    bT = link_mean(b_link, g_T)
    rows = np.vstack([sub.X_S * (h * (bS - sub.y_S))[:, None], -sub.X_T * bT[:, None]])
    weights = np.r_[np.full(sub.n_S, 1.0 / sub.n_S), np.full(sub.n_T, 1.0 / sub.n_T)]
    strata = np.r_[np.zeros(sub.n_S, dtype=int), np.ones(sub.n_T, dtype=int)]
    return rows, weights, strata


def dr_loss(sub: SubgroupData, a_S, g_S, g_T, g_link="logistic", b_link="logistic"):
    rows, weights, _ = dr_pieces(sub, a_S, g_S, g_T, b_link)
    return GlmLoss(g_link, weights=np.full(sub.n_T, 1.0 / sub.n_T),
                   linear_rows=rows, linear_weights=weights)


def _check_finite(a_S, sub):
    with np.errstate(over="ignore"):
        bad = np.flatnonzero(~np.isfinite(np.exp(a_S)))
    if bad.size:
        raise FloatingPointError(
            f"density ratio overflows on source rows {bad[:10].tolist()}"
            + (" ..." if bad.size > 10 else ""))


def _ctx_sub(ctx: DrLossContext, panel: LabeledPanel):
    sub = SubgroupData.from_panel(panel, ctx.subgroup, ctx.basis)
    pair = ctx.pair()
    a_S, g_S, g_T = _row_params(sub, pair, ctx.correction)
    _check_finite(a_S, sub)
    return sub, a_S, g_S, g_T


def dr_gradient(ctx: DrLossContext, panel: LabeledPanel, beta) -> np.ndarray:
    """avg_S[x h (b - y)] - avg_T[x b] + avg_T[x g(x'beta)]."""
    sub, a_S, g_S, g_T = _ctx_sub(ctx, panel)
    return dr_loss(sub, a_S, g_S, g_T, ctx.g_link, ctx.b_link).gradient(sub.X_T, np.asarray(beta, float))


def dr_loss_value(ctx: DrLossContext, panel: LabeledPanel, beta) -> float:
    sub, a_S, g_S, g_T = _ctx_sub(ctx, panel)
    return dr_loss(sub, a_S, g_S, g_T, ctx.g_link, ctx.b_link).value(sub.X_T, np.asarray(beta, float))


def beta_grid(sub: SubgroupData, lo=0.05, hi=2.0, num=10):
    rate = np.sqrt(np.log(max(sub.q, 2)) / min(sub.n_S, sub.n_T))
    return log_grid(lo * rate, hi * rate, num)


def fit_beta(sub: SubgroupData, pair: NuisancePair, lam=None, g_link="logistic",
             folds=5, seed=0, grid=(0.05, 2.0, 10), config=None):
    """Lasso on the DR loss with preliminary nuisances; returns (coef, lambda)."""
    a_S = sub.Phi_S @ pair.alpha.values
    _check_finite(a_S, sub)
    g_S = sub.Phi_S @ pair.gamma.values
    g_T = sub.Phi_T @ pair.gamma.values
    loss = dr_loss(sub, a_S, g_S, g_T, g_link, pair.b_link)
    fac = intercept_factors(sub.q)
    if lam is None:
        _, _, strata = dr_pieces(sub, a_S, g_S, g_T, pair.b_link)
        cv = cross_validate(sub.X_T, loss, beta_grid(sub, *grid), folds=folds, seed=seed,
                            factors=fac, linear_strata=strata)
        lam = cv.lam
    fit = solve_penalized(sub.X_T, loss, PenaltySpec(lam, fac), config)
    return fit.coef, float(lam)


def fit_preliminary_beta(ctx: DrLossContext, panel: LabeledPanel, lambda_beta, config=None):
    """Lasso minimizer of the DR loss at the context's nuisances."""
    sub, a_S, g_S, g_T = _ctx_sub(ctx, panel)
    loss = dr_loss(sub, a_S, g_S, g_T, ctx.g_link, ctx.b_link)
    return solve_penalized(sub.X_T, loss, PenaltySpec(lambda_beta, intercept_factors(sub.q)),
                           config).coef


# ---------------------------------------------------------------------------
# node-wise precision rows
# ---------------------------------------------------------------------------

def target_hessian(X_T, beta, g_link="logistic"):
    """avg_T[g'(x'beta) x x']."""
    v = link_derivative(g_link, X_T @ beta)
    return (X_T * v[:, None]).T @ X_T / X_T.shape[0]


def nodewise_lambda(Sigma, j, n, scale=1.0):
    q = Sigma.shape[0]
    diag = np.diag(Sigma)
    return scale * np.sqrt(Sigma[j, j] * np.median(diag)) * np.sqrt(np.log(max(q, 2)) / n)


def nodewise_from_sigma(Sigma, j, lam, unpenalized=(0,), tol=1e-10, max_iter=100_000):
    """Row j of an approximate inverse of ``Sigma`` by penalized regression.

    Solves ``min_k 0.5 k'S_{-j,-j}k - S_{-j,j}'k + lam ||k||_1`` (coordinates
    in ``unpenalized`` carry no penalty), then
    ``omega = (e_j - k) / (S_jj - S_{j,-j}'k)``.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    q = Sigma.shape[0]
    others = np.r_[0:j, j + 1:q]
    lam_vec = np.full(others.size, float(lam))
    lam_vec[np.isin(others, unpenalized)] = 0.0
    S = np.ascontiguousarray(Sigma[np.ix_(others, others)])
    rhs = np.ascontiguousarray(Sigma[others, j])
    kappa, _, ok = K.cov_lasso(S, rhs, lam_vec, np.zeros(others.size), max_iter, tol)
    if not ok:
        warnings.warn(f"node-wise regression for coordinate {j} did not converge",
                      RuntimeWarning, stacklevel=2)
    tau_sq = float(Sigma[j, j] - rhs @ kappa)
    if not tau_sq > 1e-10:
        raise SingularityError(f"node-wise residual variance for coordinate {j} is {tau_sq:.3g}")
    omega = np.zeros(q)
    omega[j] = 1.0
    omega[others] = -kappa
    omega /= tau_sq
    if abs(omega @ Sigma[:, j] - 1.0) > 1e-8:
        raise SingularityError(f"precision row {j} fails normalization")
    return PrecisionRow(j, omega, tau_sq, float(lam))


def nodewise_row(panel: LabeledPanel, subgroup, beta_tilde, j, lambda_omega,
                 g_link="logistic") -> PrecisionRow:
    """Precision row j of the target Hessian at ``beta_tilde``."""
    sub = SubgroupData.from_panel(panel, subgroup, IDENTITY_BASIS)
    Sigma = target_hessian(sub.X_T, np.asarray(beta_tilde, float), g_link)
    return nodewise_from_sigma(Sigma, j, lambda_omega)


# ---------------------------------------------------------------------------
# one-step correction
# ---------------------------------------------------------------------------

def one_step_terms(sub, beta, w_S, w_T, a_S, g_S, g_T, g_link="logistic",
                   b_link="logistic"):
    """Row contributions to omega_j' dr_gradient(beta) on source and target rows.

    ``w`` = X omega_j. The correction is ``mean(src) + mean(tgt)``; its
    sampling variance is estimated by ``var(src)/n_S + var(tgt)/n_T``.
    """
    h = np.exp(a_S)
    bS = link_mean(b_link, g_S)
    bT = link_mean(b_link, g_T)
    gT = link_mean(g_link, sub.X_T @ beta)
    return w_S * h * (bS - sub.y_S), w_T * (gT - bT)


def one_step_value(sub, beta, w_S, w_T, a_S, g_S, g_T, g_link="logistic",
                   b_link="logistic"):
    """omega_j' dr_gradient(beta), given w = X omega_j on source and target rows."""
    src, tgt = one_step_terms(sub, beta, w_S, w_T, a_S, g_S, g_T, g_link, b_link)
    return float(src.mean() + tgt.mean())


def _se(src, tgt):
    return float(np.sqrt(src.var() / src.size + tgt.var() / tgt.size))


def debias_subgroup(sub: SubgroupData, tuning: DebiasTuning | None = None, seed=0,
                    config=None) -> DebiasBundle:
    """Preliminary fits, node-wise rows, calibration and one-step correction."""
    tuning = tuning or DebiasTuning()
    notes = []
    pair = fit_nuisance_pair(sub, tuning.lambda_alpha, tuning.lambda_gamma, tuning.b_link,
                             seed=seed, config=config)
    beta_t, lam_beta = fit_beta(sub, pair, tuning.lambda_beta, tuning.g_link,
                                folds=tuning.cv_folds, seed=seed + 2,
                                grid=tuning.beta_grid, config=config)
    beta = beta_t.values
    lam_xi = pair.lambda_alpha if tuning.lambda_xi is None else tuning.lambda_xi
    lam_zeta = pair.lambda_gamma if tuning.lambda_zeta is None else tuning.lambda_zeta

    Sigma = target_hessian(sub.X_T, beta, tuning.g_link)
    a0 = sub.Phi_S @ pair.alpha.values
    gS0 = sub.Phi_S @ pair.gamma.values
    gT0 = sub.Phi_T @ pair.gamma.values
    q = sub.q
    deb = beta.copy()
    deb_uncal = beta.copy()
    se = np.full(q, np.nan)
    rows, corrs = [None] * q, [None] * q
    for j in range(q):
        try:
            lam_w = nodewise_lambda(Sigma, j, sub.n_T, tuning.omega_scale)
            row = nodewise_from_sigma(Sigma, j, lam_w)
        except SingularityError as exc:
            notes.append(f"coordinate {j}: {exc}; kept the preliminary estimate")
            continue
        rows[j] = row
        w_S = sub.X_S @ row.omega
        w_T = sub.X_T @ row.omega
        src, tgt = one_step_terms(sub, beta, w_S, w_T, a0, gS0, gT0, tuning.g_link,
                                  pair.b_link)
        deb_uncal[j] = beta[j] - (src.mean() + tgt.mean())
        se[j] = _se(src, tgt)
        if not tuning.calibrate:
            deb[j] = deb_uncal[j]
            continue
        try:
            corr = calibrate_weights(sub, pair, w_S, w_T, lam_xi, lam_zeta, j=j,
                                     config=config)
            a_S, g_S, g_T = _row_params(sub, pair, corr)
            src, tgt = one_step_terms(sub, beta, w_S, w_T, a_S, g_S, g_T, tuning.g_link,
                                      pair.b_link)
            val = src.mean() + tgt.mean()
            if not np.isfinite(val):
                raise FloatingPointError("non-finite calibrated correction")
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            notes.append(f"coordinate {j}: calibration failed ({exc}); used the "
                         "uncalibrated correction")
            deb[j] = deb_uncal[j]
            continue
        corrs[j] = corr
        notes.extend(corr.warnings)
        deb[j] = beta[j] - val
        se[j] = _se(src, tgt)
    for msg in notes:
        logger.debug(msg)
    used = dict(lambda_alpha=pair.lambda_alpha, lambda_gamma=pair.lambda_gamma,
                lambda_beta=lam_beta, lambda_xi=lam_xi, lambda_zeta=lam_zeta,
                omega_scale=tuning.omega_scale)
    return DebiasBundle(beta_t, deb, deb_uncal, rows, corrs, pair, used, sub.n_S, sub.n_T,
                        se, notes)


def run_algorithm1(panel: LabeledPanel, subgroup, basis: BasisMap = IDENTITY_BASIS,
                   tuning: DebiasTuning | None = None, seed=0, config=None) -> DebiasBundle:
    """Debiased coefficient vector for one subgroup of ``panel``."""
    sub = SubgroupData.from_panel(panel, subgroup, basis)
    return debias_subgroup(sub, tuning, seed=seed, config=config)


# ---------------------------------------------------------------------------
# thresholding
# ---------------------------------------------------------------------------

def threshold_vector(beta_deb, tau, keep=(0,)) -> SparseCoef:
    """Hard threshold: keep entries with |v| >= tau; ``keep`` is never zeroed."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    v = np.array(beta_deb, dtype=float)
    out = np.where(np.abs(v) >= tau, v, 0.0)
    idx = list(keep)
    out[idx] = v[idx]
    return SparseCoef(out)


def noise_scale(se, n_r, skip=(0,)):
    """Median over non-intercept coordinates of se_j * sqrt(n_r) (1 if unknown)."""
    if se is None:
        return 1.0
    se = np.delete(np.asarray(se, dtype=float), list(skip))
    se = se[np.isfinite(se)]
    return float(np.median(se) * np.sqrt(n_r)) if se.size else 1.0


def tau_grid(n_r, q, multipliers=TAU_MULTIPLIERS, scale=1.0):
    """Threshold grid ``multipliers * scale * sqrt(log q / n_r)``.

    ``scale`` is the per-observation noise level of the debiased coordinates
    (see :func:`noise_scale`); with ``scale=1`` the grid is the bare rate.
    """
    return np.asarray(multipliers, dtype=float) * scale * np.sqrt(np.log(max(q, 2)) / n_r)


def select_tau(beta_deb, reference, grid, keep=(0,)) -> float:
    """Grid value minimizing ||Thre(beta_deb, tau) - reference||^2 (ties: smallest)."""
    grid = np.sort(np.atleast_1d(np.asarray(grid, dtype=float)))
    if grid.size == 0:
        raise ValueError("tau grid is empty")
    ref = np.asarray(reference, dtype=float)
    losses = [np.sum((threshold_vector(beta_deb, t, keep).values - ref) ** 2) for t in grid]
    return float(grid[int(np.argmin(losses))])


def stable_tau(beta_deb, grid, keep=(0,)) -> float:
    """Smallest grid tau whose support equals the next grid point's."""
    grid = np.sort(np.atleast_1d(np.asarray(grid, dtype=float)))
    supports = [tuple(threshold_vector(beta_deb, t, keep).support) for t in grid]
    for k in range(grid.size - 1):
        if supports[k] == supports[k + 1]:
            return float(grid[k])
    return float(grid[-1])
