"""Density-ratio and imputation nuisance fits, and per-coordinate calibration.

For one subgroup with source rows S and target rows T:

* density ratio h(z) = exp(phi(z)'alpha), fitted by the exponential-tilting
  loss ``avg_S exp(Phi alpha) - avg_T Phi alpha``, whose population minimizer
  is the true target/source covariate density ratio when it is log-linear;
* imputation m(z) = b(phi(z)'gamma), fitted by the GLM loss on source rows.

Calibration re-fits both nuisances for one target coordinate j, weighting rows
by the debiasing weights w_i = omega_j'x_i, so that the first-order influence
of nuisance error on coordinate j is removed. Rows are split by the sign of
w_i and each half gets its own pair of convex problems.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import (IDENTITY_BASIS, MAJORITY, MINORITY, SOURCE, TARGET, BasisMap,
                   LabeledPanel, expand_basis, stratum_name)
from .solver import (DivergenceError, GlmLoss, PenaltySpec, SparseCoef,
                     cross_validate, intercept_factors,
                     link_derivative, link_mean, log_grid, solve_penalized)

logger = logging.getLogger(__name__)


@dataclass
class SubgroupData:
    """Design matrices of one subgroup, split into source and target rows."""

    subgroup: int
    X_S: np.ndarray
    X_T: np.ndarray
    Phi_S: np.ndarray
    Phi_T: np.ndarray
    y_S: np.ndarray

    @property
    def n_S(self) -> int:
        return self.X_S.shape[0]

    @property
    def n_T(self) -> int:
        return self.X_T.shape[0]

    @property
    def q(self) -> int:
        return self.X_S.shape[1]

    @property
    def d(self) -> int:
        return self.Phi_S.shape[1]

    @classmethod
    def from_panel(cls, panel: LabeledPanel, subgroup, basis: BasisMap = IDENTITY_BASIS,
                   Phi=None):
        if subgroup not in (MAJORITY, MINORITY):
            raise ValueError("subgroup must be 0 (minority) or 1 (majority)")
        panel.require(SOURCE, subgroup)
        panel.require(TARGET, subgroup)
        if Phi is None:
            Phi = expand_basis(panel, basis)
        src = panel.view(SOURCE, subgroup).indices
        tgt = panel.view(TARGET, subgroup).indices
        return cls(subgroup, panel.X[src], panel.X[tgt],
                   np.asfortranarray(Phi[src]), np.asfortranarray(Phi[tgt]),
                   np.asarray(panel.y[src], dtype=float))

    def take(self, src_idx, tgt_idx) -> SubgroupData:
        return SubgroupData(self.subgroup, self.X_S[src_idx], self.X_T[tgt_idx],
                            np.asfortranarray(self.Phi_S[src_idx]),
                            np.asfortranarray(self.Phi_T[tgt_idx]), self.y_S[src_idx])


@dataclass
class NuisancePair:
    alpha: SparseCoef
    gamma: SparseCoef
    b_link: str = "logistic"
    subgroup: int = MINORITY
    lambda_alpha: float | None = None
    lambda_gamma: float | None = None


@dataclass
class CalibratedCorrection:
    """Calibrated corrections for coordinate ``j`` on the two sign strata.

    ``pos_S`` / ``pos_T`` flag source / target rows with w_i >= 0.
    """

    j: int
    xi_pos: SparseCoef
    xi_neg: SparseCoef
    zeta_pos: SparseCoef
    zeta_neg: SparseCoef
    pos_S: np.ndarray = field(repr=False)
    pos_T: np.ndarray = field(repr=False)
    warnings: list = field(default_factory=list)

    def xi(self, positive: bool) -> SparseCoef:
        return self.xi_pos if positive else self.xi_neg

    def zeta(self, positive: bool) -> SparseCoef:
        return self.zeta_pos if positive else self.zeta_neg


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def density_ratio_loss(sub: SubgroupData, weights_S=None, weights_T=None, offset=None):
    """Exponential-tilting loss on ``Phi_S`` with target rows as linear term."""
    wS = np.full(sub.n_S, 1.0 / sub.n_S) if weights_S is None else weights_S
    wT = np.full(sub.n_T, 1.0 / sub.n_T) if weights_T is None else weights_T
    return GlmLoss("exponential", weights=wS, offset=offset,
                   linear_rows=-sub.Phi_T, linear_weights=wT)


def imputation_loss(sub: SubgroupData, b_link="logistic", weights=None, offset=None):
    w = np.full(sub.n_S, 1.0 / sub.n_S) if weights is None else weights
    return GlmLoss(b_link, y=sub.y_S, weights=w, offset=offset)


def density_ratio_objective(sub: SubgroupData, alpha):
    """avg_S exp(Phi alpha) - avg_T Phi alpha (no penalty)."""
    return float(np.mean(np.exp(sub.Phi_S @ alpha)) - np.mean(sub.Phi_T @ alpha))


def nuisance_grid(sub: SubgroupData, num=14, lo=0.01, hi=4.0):
    """Log-spaced penalties from lo*sqrt(log d / n_T) to hi*sqrt(log d / n_min).

    n_min = min(n_S, n_T). The upper end must reach the source-side noise
    level: with few source rows the density-ratio loss is unbounded below at
    penalties of order sqrt(log d / n_T).
    """
    logd = np.log(max(sub.d, 2))
    return log_grid(lo * np.sqrt(logd / sub.n_T),
                    hi * np.sqrt(logd / min(sub.n_S, sub.n_T)), num)


# ---------------------------------------------------------------------------
# preliminary fits
# ---------------------------------------------------------------------------

def fit_alpha(sub: SubgroupData, lam, config=None) -> SparseCoef:
    loss = density_ratio_loss(sub)
    try:
        fit = solve_penalized(sub.Phi_S, loss, PenaltySpec(lam, intercept_factors(sub.d)), config)
    except DivergenceError as exc:
        raise DivergenceError(
            f"density ratio of {stratum_name(r=sub.subgroup)} subgroup diverges: source and "
            f"target rows are separable along basis coordinate {exc.direction}",
            direction=exc.direction) from None
    return fit.coef


def fit_gamma(sub: SubgroupData, lam, b_link="logistic", config=None) -> SparseCoef:
    if b_link == "logistic" and np.ptp(sub.y_S) == 0 and lam == 0:
        raise DivergenceError("all source outcomes are identical; the unpenalized "
                              "logistic imputation model has no finite solution")
    fit = solve_penalized(sub.Phi_S, imputation_loss(sub, b_link),
                          PenaltySpec(lam, intercept_factors(sub.d)), config)
    return fit.coef


def tune_alpha(sub: SubgroupData, grid=None, folds=5, seed=0):
    grid = nuisance_grid(sub) if grid is None else grid
    loss = density_ratio_loss(sub)
    # source rows are the design; target rows live in the linear term
    cv = cross_validate(sub.Phi_S, loss, grid, folds=folds, seed=seed,
                        factors=intercept_factors(sub.d))
    return cv.lam


def tune_gamma(sub: SubgroupData, b_link="logistic", grid=None, folds=5, seed=0):
    grid = nuisance_grid(sub) if grid is None else grid
    cv = cross_validate(sub.Phi_S, imputation_loss(sub, b_link), grid, folds=folds,
                        seed=seed, factors=intercept_factors(sub.d))
    return cv.lam


def fit_nuisance_pair(sub: SubgroupData, lambda_alpha=None, lambda_gamma=None,
                      b_link="logistic", seed=0, config=None) -> NuisancePair:
    """Fit both nuisances; penalties left as None are chosen by 5-fold CV."""
    if lambda_alpha is None:
        lambda_alpha = tune_alpha(sub, seed=seed)
    if lambda_gamma is None:
        lambda_gamma = tune_gamma(sub, b_link, seed=seed + 1)
    alpha = fit_alpha(sub, lambda_alpha, config)
    gamma = fit_gamma(sub, lambda_gamma, b_link, config)
    return NuisancePair(alpha, gamma, b_link, sub.subgroup, lambda_alpha, lambda_gamma)


def fit_density_ratio(panel: LabeledPanel, subgroup, basis: BasisMap = IDENTITY_BASIS,
                      lambda_alpha=0.0, config=None) -> SparseCoef:
    """Exponential-tilting density-ratio coefficients for one subgroup.

    Returns alpha minimizing ``avg_S exp(Phi'alpha) - avg_T Phi'alpha
    + lambda_alpha * ||alpha_{-0}||_1``; the intercept is unpenalized so
    ``avg_S exp(Phi'alpha) = 1`` at the optimum.
    """
    return fit_alpha(SubgroupData.from_panel(panel, subgroup, basis), lambda_alpha, config)


def fit_imputation(panel: LabeledPanel, subgroup, basis: BasisMap = IDENTITY_BASIS,
                   lambda_gamma=0.0, b_link="logistic", config=None) -> SparseCoef:
    """Penalized GLM of Y on phi(Z) over the subgroup's source rows."""
    panel.require(SOURCE, subgroup)
    Phi = expand_basis(panel, basis)
    src = panel.view(SOURCE, subgroup).indices
    sub = SubgroupData(subgroup, panel.X[src], panel.X[:0], np.asfortranarray(Phi[src]),
                       np.asfortranarray(Phi[:0]), np.asarray(panel.y[src], dtype=float))
    return fit_gamma(sub, lambda_gamma, b_link, config)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _rms(v):
    return float(np.sqrt(np.mean(v * v))) if v.size else 0.0


def calibrate_weights(sub: SubgroupData, pair: NuisancePair, w_S, w_T,
                      lambda_xi, lambda_zeta, j=0, scale_lambda=True,
                      config=None) -> CalibratedCorrection:
    """Calibrated corrections given debiasing weights on source/target rows.

    With ``scale_lambda`` the penalties are ``lambda * rms(row factor) *
    sqrt(n_S,stratum / n_S)``, which keeps them proportional to the noise
    level of each stratum's gradient; otherwise they are used as given.
    """
    alpha, gamma = pair.alpha.values, pair.gamma.values
    eta_a = sub.Phi_S @ alpha
    eta_gS = sub.Phi_S @ gamma
    eta_gT = sub.Phi_T @ gamma
    bdot_S = link_derivative(pair.b_link, eta_gS)
    bdot_T = link_derivative(pair.b_link, eta_gT)
    h_S = np.exp(eta_a)
    pos_S, pos_T = w_S >= 0, w_T >= 0
    fac = intercept_factors(sub.d)
    out, notes = {}, []
    for positive, mS, mT in ((True, pos_S, pos_T), (False, ~pos_S, ~pos_T)):
        tag = "pos" if positive else "neg"
        nS, nT = int(mS.sum()), int(mT.sum())
        zero = SparseCoef.zeros(sub.d)
        xi = zeta = zero
        if nS + nT < 2 or nS < 2:
            if nS + nT > 0:
                notes.append(f"j={j}: {tag} stratum has {nS} source / {nT} target rows; "
                             "calibration skipped")
            out[tag] = (zero, zero)
            continue
        aw_S, aw_T = np.abs(w_S[mS]), np.abs(w_T[mT])
        Phi_k = np.asfortranarray(sub.Phi_S[mS])
        # density-ratio correction: balances b'-weighted source and target moments
        if nT == 0:
            notes.append(f"j={j}: {tag} stratum has no target rows; density-ratio "
                         "calibration skipped")
        else:
            f_xi = aw_S * bdot_S[mS]
            lam = lambda_xi
            if scale_lambda:
                lam = lambda_xi * _rms(f_xi) * np.sqrt(nS / sub.n_S)
            loss = GlmLoss("exponential", weights=f_xi / sub.n_S, offset=eta_a[mS],
                           linear_rows=-sub.Phi_T[mT],
                           linear_weights=aw_T * bdot_T[mT] / sub.n_T)
            xi = _safe_fit(Phi_k, loss, lam, fac, config, notes, f"j={j}: {tag} xi")
        # imputation correction: h-weighted residual moment on source rows
        yk = sub.y_S[mS]
        if pair.b_link == "logistic" and np.ptp(yk) == 0:
            notes.append(f"j={j}: {tag} stratum outcomes are all equal; imputation "
                         "calibration skipped")
        else:
            f_zeta = aw_S * h_S[mS]
            lam = lambda_zeta
            if scale_lambda:
                lam = lambda_zeta * _rms(f_zeta) * np.sqrt(nS / sub.n_S)
            loss = GlmLoss(pair.b_link, y=yk, weights=f_zeta / sub.n_S, offset=eta_gS[mS])
            zeta = _safe_fit(Phi_k, loss, lam, fac, config, notes, f"j={j}: {tag} zeta")
        out[tag] = (xi, zeta)
    for msg in notes:
        logger.warning(msg)
    return CalibratedCorrection(j, out["pos"][0], out["neg"][0], out["pos"][1], out["neg"][1],
                                pos_S, pos_T, notes)


def _safe_fit(design, loss, lam, factors, config, notes, label):
    try:
        fit = solve_penalized(design, loss, PenaltySpec(lam, factors), config)
    except DivergenceError as exc:
        notes.append(f"{label}: {exc}; correction set to zero")
        return SparseCoef.zeros(design.shape[1])
    if not fit.converged:
        notes.append(f"{label}: solver did not converge (KKT {fit.kkt_residual:.2g})")
    return fit.coef


def calibrate_coordinate(panel: LabeledPanel, subgroup, basis: BasisMap, pair: NuisancePair,
                         omega_row, j, lambda_xi, lambda_zeta, scale_lambda=False,
                         config=None) -> CalibratedCorrection:
    """Calibrate the nuisance pair for target coordinate ``j``.

    Rows of the subgroup are split by the sign of ``omega_row'x_i`` (zero
    joins the positive side); on each side the two weighted lasso problems
    are solved with absolute weights. Penalties are used as given unless
    ``scale_lambda`` is set.
    """
    sub = SubgroupData.from_panel(panel, subgroup, basis)
    omega_row = np.asarray(omega_row, dtype=float)
    if omega_row.shape != (sub.q,):
        raise ValueError(f"omega_row has length {omega_row.size}, expected q = {sub.q}")
    return calibrate_weights(sub, pair, sub.X_S @ omega_row, sub.X_T @ omega_row,
                             lambda_xi, lambda_zeta, j=j, scale_lambda=scale_lambda,
                             config=config)


def moment_residuals(sub: SubgroupData, pair: NuisancePair, w_S, w_T, corr=None):
    """Signed calibration moments for coordinate weights ``w``.

    Returns ``(m_xi, m_zeta)``: the b'-weighted density-ratio balance and the
    h-weighted imputation residual, both of length d, with each row evaluated
    at its own stratum's corrected parameters when ``corr`` is given.
    """
    a_S, g_S, g_T = _row_params(sub, pair, corr)
    bdot_S = link_derivative(pair.b_link, sub.Phi_S @ pair.gamma.values)
    bdot_T = link_derivative(pair.b_link, sub.Phi_T @ pair.gamma.values)
    h = np.exp(a_S)
    m_xi = sub.Phi_S.T @ (w_S * bdot_S * h) / sub.n_S - sub.Phi_T.T @ (w_T * bdot_T) / sub.n_T
    resid = link_mean(pair.b_link, g_S) - sub.y_S
    h0 = np.exp(sub.Phi_S @ pair.alpha.values)
    m_zeta = sub.Phi_S.T @ (w_S * h0 * resid) / sub.n_S
    return m_xi, m_zeta


def _row_params(sub, pair, corr):
    """Per-row linear predictors (alpha on S, gamma on S and T)."""
    a_S = sub.Phi_S @ pair.alpha.values
    g_S = sub.Phi_S @ pair.gamma.values
    g_T = sub.Phi_T @ pair.gamma.values
    if corr is None:
        return a_S, g_S, g_T
    for positive, mS, mT in ((True, corr.pos_S, corr.pos_T), (False, ~corr.pos_S, ~corr.pos_T)):
        xi, zeta = corr.xi(positive).values, corr.zeta(positive).values
        if xi.any():
            a_S[mS] += sub.Phi_S[mS] @ xi
        if zeta.any():
            g_S[mS] += sub.Phi_S[mS] @ zeta
            g_T[mT] += sub.Phi_T[mT] @ zeta
    return a_S, g_S, g_T

