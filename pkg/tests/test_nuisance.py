from __future__ import annotations

import numpy as np
import pytest
from scipy import integrate, optimize, stats
from scipy.special import expit

from makeup.data import IDENTITY_BASIS, MINORITY, BasisMap, LabeledPanel
from makeup.nuisance import (NuisancePair, SubgroupData, calibrate_coordinate, calibrate_weights,
                             fit_density_ratio, fit_imputation, moment_residuals)
from makeup.solver import DivergenceError, SparseCoef, intercept_factors, lambda_max

INTERCEPT_ONLY = BasisMap(lambda z: z[:1], d=1)


def _panel(XS, XT, yS, WS=None, WT=None):
    n_s, n_t = XS.shape[0], XT.shape[0]
    s = np.r_[np.ones(n_s), np.zeros(n_t)]
    r = np.zeros(n_s + n_t)
    y = np.r_[yS, np.full(n_t, np.nan)]
    W = None if WS is None else np.vstack([WS, WT])
    return LabeledPanel(s, r, y, np.vstack([XS, XT]), W)


def _with_intercept(A):
    return np.column_stack([np.ones(A.shape[0]), A])


# ---------------------------------------------------------------------------
# density ratio
# ---------------------------------------------------------------------------

def test_same_distribution_intercept_only_gives_unit_ratio(rng):
    XS = _with_intercept(rng.standard_normal((300, 2)))
    XT = _with_intercept(rng.standard_normal((200, 2)))
    alpha = fit_density_ratio(_panel(XS, XT, np.zeros(300)), MINORITY, INTERCEPT_ONLY, 0.0)
    assert np.exp(alpha.values[0]) == pytest.approx(1.0, abs=1e-10)


def test_intercept_only_first_order_condition(rng):
    # shifted strata: the one-dimensional FOC still forces exp(alpha) = 1
    XS = _with_intercept(rng.standard_normal((150, 2)))
    XT = _with_intercept(rng.standard_normal((400, 2)) + 1.0)
    alpha = fit_density_ratio(_panel(XS, XT, np.zeros(150)), MINORITY, INTERCEPT_ONLY, 0.0)
    assert np.exp(alpha.values[0]) == pytest.approx(1.0, abs=1e-10)


def _tilt_oracle(shift):
    """Solve E_S[exp(a + b x)(1, x)] = E_T[(1, x)] by quadrature."""
    def foc(ab):
        a, b = ab
        f0 = integrate.quad(lambda x: np.exp(a + b * x) * stats.norm.pdf(x), -12, 12)[0]
        f1 = integrate.quad(lambda x: x * np.exp(a + b * x) * stats.norm.pdf(x), -12, 12)[0]
        return [f0 - 1.0, f1 - shift]
    return optimize.fsolve(foc, [0.0, 0.0], xtol=1e-12)


def test_density_ratio_recovers_exponential_tilt():
    rng = np.random.default_rng(3)
    n = 40_000
    XS = _with_intercept(rng.standard_normal((n, 1)))
    XT = _with_intercept(rng.standard_normal((n, 1)) + 0.5)
    alpha = fit_density_ratio(_panel(XS, XT, np.zeros(n)), MINORITY, IDENTITY_BASIS, 0.0)
    oracle = _tilt_oracle(0.5)
    # sampling sd of each coefficient is about 0.008 here
    np.testing.assert_allclose(alpha.values, oracle, atol=0.03)


def test_density_ratio_self_normalization(rng):
    XS = _with_intercept(rng.standard_normal((300, 4)))
    XT = _with_intercept(rng.standard_normal((300, 4)) + 0.3)
    panel = _panel(XS, XT, np.zeros(300))
    for lam in (0.0, 0.02, 0.2):
        alpha = fit_density_ratio(panel, MINORITY, IDENTITY_BASIS, lam)
        assert np.mean(np.exp(XS @ alpha.values)) == pytest.approx(1.0, abs=1e-6)


def test_density_ratio_separable_diverges(rng):
    XS = _with_intercept(rng.uniform(-1, 0, (50, 1)))
    XT = _with_intercept(rng.uniform(1, 2, (50, 1)))
    with pytest.raises(DivergenceError, match="coordinate"):
        fit_density_ratio(_panel(XS, XT, np.zeros(50)), MINORITY, IDENTITY_BASIS, 0.0)


# ---------------------------------------------------------------------------
# imputation
# ---------------------------------------------------------------------------

def test_imputation_consistency_identity_link():
    rng = np.random.default_rng(8)
    n = 20_000
    gamma = np.array([0.3, 1.0, -0.5, 0.0, 0.25])
    XS = _with_intercept(rng.standard_normal((n, 4)))
    y = XS @ gamma + rng.standard_normal(n)
    XT = XS[:10]
    est = fit_imputation(_panel(XS, XT, y), MINORITY, IDENTITY_BASIS, 0.0, b_link="identity")
    assert np.linalg.norm(est.values - gamma) < 0.05


def test_imputation_lambda_max_null_model(rng):
    XS = _with_intercept(rng.standard_normal((200, 3)))
    y = (rng.random(200) < 0.3).astype(float)
    panel = _panel(XS, XS[:5], y)
    sub = SubgroupData.from_panel(panel, MINORITY)
    from makeup.nuisance import imputation_loss

    top = lambda_max(sub.Phi_S, imputation_loss(sub, "logistic"), intercept_factors(4))
    est = fit_imputation(panel, MINORITY, IDENTITY_BASIS, top * 1.001)
    assert np.all(est.values[1:] == 0)
    assert est.values[0] == pytest.approx(np.log(y.mean() / (1 - y.mean())), abs=1e-8)


def test_imputation_constant_outcome_identity(rng):
    XS = _with_intercept(rng.standard_normal((50, 3)))
    est = fit_imputation(_panel(XS, XS[:3], np.full(50, 2.5)), MINORITY, IDENTITY_BASIS, 0.0,
                         b_link="identity")
    np.testing.assert_allclose(est.values, [2.5, 0, 0, 0], atol=1e-10)


def test_imputation_identical_binary_outcomes_diverge(rng):
    XS = _with_intercept(rng.standard_normal((50, 2)))
    with pytest.raises(DivergenceError):
        fit_imputation(_panel(XS, XS[:3], np.ones(50)), MINORITY, IDENTITY_BASIS, 0.0)


def test_imputation_needs_source_rows(rng):
    XT = _with_intercept(rng.standard_normal((5, 2)))
    panel = LabeledPanel(np.zeros(5), np.zeros(5), np.full(5, np.nan), XT)
    with pytest.raises(ValueError, match="source-minority"):
        fit_imputation(panel, MINORITY)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _correct_models(rng, n, d=4):
    """Source N(0, I); target tilted by alpha; logistic outcome with gamma."""
    alpha = np.r_[0.0, 0.4, -0.3, np.zeros(d - 3)]
    gamma = np.r_[0.2, 0.8, -0.6, np.zeros(d - 3)]
    ZS = rng.standard_normal((n, d - 1))
    # exponential tilt of a standard normal is a mean shift
    ZT = rng.standard_normal((n, d - 1)) + alpha[1:]
    alpha[0] = -0.5 * np.sum(alpha[1:] ** 2)
    XS, XT = _with_intercept(ZS), _with_intercept(ZT)
    y = (rng.random(n) < expit(XS @ gamma)).astype(float)
    return _panel(XS, XT, y), alpha, gamma


def test_calibration_vanishes_under_correct_models():
    rng = np.random.default_rng(21)
    panel, alpha, gamma = _correct_models(rng, 20_000)
    pair = NuisancePair(SparseCoef(alpha), SparseCoef(gamma), "logistic", MINORITY)
    corr = calibrate_coordinate(panel, MINORITY, IDENTITY_BASIS, pair, np.eye(4)[0], 0,
                                1e-6, 1e-6)
    for positive in (True, False):
        assert np.max(np.abs(corr.xi(positive).values)) < 0.05
        assert np.max(np.abs(corr.zeta(positive).values)) < 0.05


def test_calibration_lambda_max_gives_zero(rng):
    panel, alpha, gamma = _correct_models(rng, 400)
    pair = NuisancePair(SparseCoef(alpha), SparseCoef(gamma), "logistic", MINORITY)
    omega = np.r_[0.1, 1.0, -0.5, 0.2]
    corr = calibrate_coordinate(panel, MINORITY, IDENTITY_BASIS, pair, omega, 1, 1e3, 1e3)
    for positive in (True, False):
        assert not corr.xi(positive).values[1:].any()
        assert not corr.zeta(positive).values[1:].any()


def test_single_row_negative_stratum_zero_with_warning(rng):
    panel, alpha, gamma = _correct_models(rng, 200)
    sub = SubgroupData.from_panel(panel, MINORITY)
    pair = NuisancePair(SparseCoef(alpha), SparseCoef(gamma), "logistic", MINORITY)
    w_S = np.ones(sub.n_S)
    w_S[0] = -1.0
    corr = calibrate_weights(sub, pair, w_S, np.ones(sub.n_T), 0.01, 0.01)
    assert not corr.xi_neg.values.any() and not corr.zeta_neg.values.any()
    assert any("neg stratum" in m for m in corr.warnings)
    assert corr.pos_S.sum() == sub.n_S - 1


def test_zero_weights_join_positive_stratum(rng):
    panel, alpha, gamma = _correct_models(rng, 100)
    sub = SubgroupData.from_panel(panel, MINORITY)
    pair = NuisancePair(SparseCoef(alpha), SparseCoef(gamma), "logistic", MINORITY)
    w_S = np.zeros(sub.n_S)
    corr = calibrate_weights(sub, pair, w_S, np.zeros(sub.n_T), 0.01, 0.01)
    assert corr.pos_S.all() and corr.pos_T.all()


def test_calibration_drives_moments_to_lambda_level():
    rng = np.random.default_rng(5)
    panel, alpha, gamma = _correct_models(rng, 800)
    sub = SubgroupData.from_panel(panel, MINORITY)
    # deliberately wrong preliminary nuisances
    pair = NuisancePair(SparseCoef(alpha * 0.3), SparseCoef(gamma * 0.5), "logistic", MINORITY)
    lam = 0.002
    for j, omega in enumerate((np.r_[1.0, 0, 0, 0], np.r_[0.2, 1.0, -0.4, 0.3])):
        w_S, w_T = sub.X_S @ omega, sub.X_T @ omega
        before = moment_residuals(sub, pair, w_S, w_T)
        corr = calibrate_weights(sub, pair, w_S, w_T, lam, lam, j=j, scale_lambda=False)
        after = moment_residuals(sub, pair, w_S, w_T, corr)
        for b, a in zip(before, after):
            # each stratum's KKT bounds its moment by lambda; the signed total by 2 lambda
            assert np.max(np.abs(a)) <= 2 * lam + 1e-6
            assert np.max(np.abs(a)) <= np.max(np.abs(b)) + 2 * lam


# ---------------------------------------------------------------------------
# double robustness of the DR moment
# ---------------------------------------------------------------------------

def _dr_moment_sup(rng, n, wrong):
    """Sup-norm of the DR estimating function at the target root, one model wrong."""
    from makeup.debias import DrLossContext, dr_gradient
    from makeup.nuisance import fit_gamma
    from makeup.simgen import solve_logistic_population

    shift = np.r_[0.5, 0.0]
    alpha = np.r_[-0.125, 0.5, 0.0, 0.0]
    mean = lambda X: expit(0.3 + X[:, 1] - 0.8 * X[:, 2] + 0.6 * X[:, 1] * X[:, 2])
    XS = _with_intercept(rng.standard_normal((n, 2)))
    XT = _with_intercept(rng.standard_normal((n, 2)) + shift)
    panel = _panel(XS, XT, (rng.random(n) < mean(XS)).astype(float))
    # the interaction column makes the imputation model correct when fitted on it
    basis = BasisMap(lambda z: np.r_[z, z[1] * z[2]], d=4)
    sub = SubgroupData.from_panel(panel, MINORITY, basis)
    if wrong == "imputation":
        a = alpha
        g = np.r_[fit_gamma(SubgroupData.from_panel(panel, MINORITY), 0.0).values, 0.0]
    else:
        a = np.zeros(4)
        g = fit_gamma(sub, 0.0).values
    big = _with_intercept(rng.standard_normal((400_000, 2)) + shift)
    beta_bar, _ = solve_logistic_population(big, mean(big))
    ctx = DrLossContext(MINORITY, a, g, basis=basis)
    return np.max(np.abs(dr_gradient(ctx, panel, beta_bar)))


@pytest.mark.parametrize("wrong", ["imputation", "density"])
def test_dr_moment_shrinks_with_n(wrong):
    sups = {}
    for n in (2000, 8000, 32000):
        vals = [_dr_moment_sup(np.random.default_rng(100 * k + n % 97), n, wrong)
                for k in range(5)]
        sups[n] = np.median(vals)
    # n^{-1/2}: a factor of 4 from 2000 to 32000; require at least 2
    assert sups[2000] / sups[32000] > 2.0
    assert sups[32000] < 0.03
