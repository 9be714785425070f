"""Comparison estimators: importance weighting, imputation and a naive fit.

All of them are single penalized GLM fits on one stratum of the subgroup:

* ``iw``: source rows weighted by the fitted density ratio exp(phi'alpha),
* ``im``: target rows with the imputed mean b(phi'gamma) as outcome,
* ``naive``: unweighted source rows.

The ``*_alasso`` variants refit with adaptive penalty factors 1/|pilot|
taken from the plain fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import IDENTITY_BASIS, MINORITY, SOURCE, TARGET, BasisMap, LabeledPanel
from .nuisance import SubgroupData, fit_alpha, fit_gamma, tune_alpha, tune_gamma
from .solver import (GlmLoss, PenaltySpec, SparseCoef, adaptive_factors, cross_validate,
                     intercept_factors, lambda_max, link_mean, log_grid, solve_penalized)

METHODS = ("iw", "iw_alasso", "im", "im_alasso", "naive")


@dataclass(frozen=True)
class BaselineSpec:
    """Which baseline to fit and how its penalty is chosen.

    ``lam`` fixes the penalty and skips cross-validation. The grid runs
    from lambda-max down to ``ratio`` times it.
    """

    method: str
    folds: int = 5
    num: int = 20
    ratio: float = 0.01
    lam: float | None = None
    g_link: str = "logistic"
    b_link: str = "logistic"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline {self.method!r}; expected one of {METHODS}")
        if self.folds < 2 or self.num < 1 or not 0 < self.ratio < 1:
            raise ValueError("need folds >= 2, num >= 1 and 0 < ratio < 1")

    @property
    def nuisance(self) -> str | None:
        if self.method.startswith("iw"):
            return "alpha"
        if self.method.startswith("im"):
            return "gamma"
        return None

    @property
    def adaptive(self) -> bool:
        return self.method.endswith("_alasso")


@dataclass
class BaselineFit:
    coef: SparseCoef
    lam: float
    pilot_lam: float | None = None
    nuisance_lam: float | None = None
    tuning: dict = field(default_factory=dict)


def iw_weights(sub: SubgroupData, alpha) -> np.ndarray:
    """Density-ratio weights on source rows, rescaled to mean 1."""
    w = np.exp(sub.Phi_S @ np.asarray(getattr(alpha, "values", alpha), dtype=float))
    return w / w.mean()


def im_outcomes(sub: SubgroupData, gamma, b_link="logistic") -> np.ndarray:
    """Imputed conditional means on target rows."""
    g = np.asarray(getattr(gamma, "values", gamma), dtype=float)
    return link_mean(b_link, sub.Phi_T @ g)


def _design_and_loss(sub: SubgroupData, spec: BaselineSpec, nuisance):
    if spec.method == "naive":
        return sub.X_S, GlmLoss(spec.g_link, y=sub.y_S, weights=np.full(sub.n_S, 1.0 / sub.n_S))
    if spec.nuisance == "alpha":
        w = iw_weights(sub, nuisance) / sub.n_S
        return sub.X_S, GlmLoss(spec.g_link, y=sub.y_S, weights=w)
    y = im_outcomes(sub, nuisance, spec.b_link)
    return sub.X_T, GlmLoss(spec.g_link, y=y, weights=np.full(sub.n_T, 1.0 / sub.n_T))


def _fit_penalized(X, loss, factors, spec: BaselineSpec, seed):
    if spec.lam is not None:
        lam = float(spec.lam)
    else:
        top = lambda_max(X, loss, factors)
        if not top > 0:
            lam = 0.0
        else:
            grid = log_grid(spec.ratio * top, top, spec.num)
            lam = cross_validate(X, loss, grid, folds=spec.folds, seed=seed, factors=factors).lam
    return solve_penalized(X, loss, PenaltySpec(lam, factors)).coef, lam


def run_baseline(sub: SubgroupData, spec: BaselineSpec, seed=0, nuisance=None) -> BaselineFit:
    """Fit one baseline on prepared subgroup data.

    ``nuisance`` may carry already-fitted alpha (iw) or gamma (im)
    coefficients; otherwise they are fitted here with cross-validated
    penalties.
    """
    nu_lam = None
    if spec.nuisance == "alpha":
        if sub.n_S == 0 or sub.n_T == 0:
            raise ValueError("importance weighting needs source and target rows")
        if nuisance is None:
            nu_lam = tune_alpha(sub, seed=seed)
            nuisance = fit_alpha(sub, nu_lam)
    elif spec.nuisance == "gamma":
        if sub.n_S == 0 or sub.n_T == 0:
            raise ValueError("imputation needs source rows to fit and target rows to impute")
        if nuisance is None:
            nu_lam = tune_gamma(sub, spec.b_link, seed=seed)
            nuisance = fit_gamma(sub, nu_lam, spec.b_link)
    elif sub.n_S == 0:
        raise ValueError("the naive fit needs source rows")

    X, loss = _design_and_loss(sub, spec, nuisance)
    base = intercept_factors(X.shape[1])
    coef, lam = _fit_penalized(X, loss, base, spec, seed + 1)
    if not spec.adaptive:
        return BaselineFit(coef, lam, nuisance_lam=nu_lam, tuning={"lambda": lam})
    factors = adaptive_factors(coef.values)
    refit = BaselineSpec(spec.method, spec.folds, spec.num, spec.ratio, None,
                         spec.g_link, spec.b_link)
    coef2, lam2 = _fit_penalized(X, loss, factors, refit, seed + 2)
    return BaselineFit(coef2, lam2, pilot_lam=lam, nuisance_lam=nu_lam,
                       tuning={"lambda": lam2, "pilot_lambda": lam})


def fit_baseline(panel: LabeledPanel, subgroup=MINORITY, basis: BasisMap = IDENTITY_BASIS,
                 spec: BaselineSpec | None = None, seed=0, nuisance=None) -> SparseCoef:
    """Fit a comparison estimator for one subgroup of ``panel``."""
    spec = spec or BaselineSpec("naive")
    panel.require(SOURCE, subgroup)
    if spec.nuisance is not None:
        panel.require(TARGET, subgroup)
    sub = SubgroupData.from_panel(panel, subgroup, basis)
    return run_baseline(sub, spec, seed, nuisance).coef
