"""Run a set of estimators on one panel and collect their coefficients."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .baselines import BaselineSpec, run_baseline
from .data import IDENTITY_BASIS, MINORITY, BasisMap, LabeledPanel
from .debias import DebiasTuning
from .nuisance import NuisancePair, SubgroupData, fit_alpha, fit_gamma, tune_alpha, tune_gamma
from .solver import SparseCoef
from .transfer import TransferOptions, run_algorithm3

logger = logging.getLogger(__name__)

MAKEUP_METHODS = ("MU", "MU_maj-g", "MU_min-o")
BASELINE_METHODS = {"IW": "iw", "IW_aLasso": "iw_alasso", "IM": "im",
                    "IM_aLasso": "im_alasso", "naive": "naive"}
ALL_METHODS = MAKEUP_METHODS + tuple(BASELINE_METHODS)


def parse_methods(spec) -> tuple:
    """Normalize a comma list or sequence of method names, keeping canonical order."""
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    names = [n.strip() for n in names if n.strip()]
    unknown = sorted(set(names) - set(ALL_METHODS))
    if unknown:
        raise ValueError(f"unknown method(s) {unknown}; expected names from {list(ALL_METHODS)}")
    if not names:
        raise ValueError("no methods requested")
    return tuple(m for m in ALL_METHODS if m in names)


@dataclass
class MethodFit:
    method: str
    coef: np.ndarray | None
    tuning: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def support(self) -> list:
        return [] if self.coef is None else [int(j) for j in np.flatnonzero(self.coef)]


def _capture(fn):
    """Call ``fn`` and return (value, warning messages)."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = fn()
    return out, [str(w.message) for w in caught]


def fit_methods(panel: LabeledPanel, methods=ALL_METHODS, basis: BasisMap = IDENTITY_BASIS,
                tuning: DebiasTuning | None = None, seed=0,
                options: TransferOptions | None = None) -> dict:
    """Fit every requested method for the minority; failures become error entries.

    The MAKEUP variants share one run of the cross-fitted ensemble. The
    baselines reuse the minority nuisance models from that run when it
    exists, so all methods see the same density ratio and imputation.
    """
    methods = parse_methods(methods)
    out = {}
    pair = None
    if any(m in MAKEUP_METHODS for m in methods):
        try:
            res, caught = _capture(lambda: run_algorithm3(panel, basis, tuning, seed=seed,
                                                          options=options))
        except Exception as exc:  # noqa: BLE001 - recorded per method
            msg = f"{type(exc).__name__}: {exc}"
            for m in methods:
                if m in MAKEUP_METHODS:
                    out[m] = MethodFit(m, None, error=msg)
        else:
            notes = res.warnings + caught
            common = {"tau_majority": res.tau_majority, **res.summary()}
            full = res.minority_full
            if full is not None:
                pair = full.pair
                common.update({k: v for k, v in full.tuning.items()})
            coefs = {"MU": res.beta_mu, "MU_maj-g": res.beta_maj_guided,
                     "MU_min-o": res.beta_min_only}
            for m in MAKEUP_METHODS:
                if m in methods:
                    c = coefs[m]
                    out[m] = MethodFit(m, None if c is None else np.asarray(c.values),
                                       dict(common), list(notes))

    wanted = [m for m in methods if m in BASELINE_METHODS]
    if wanted:
        sub = SubgroupData.from_panel(panel, MINORITY, basis)
        need = {BaselineSpec(BASELINE_METHODS[m]).nuisance for m in wanted} - {None}
        if pair is None and need:
            try:
                pair = _fit_needed(sub, need, tuning, seed)
            except Exception as exc:  # noqa: BLE001
                for m in wanted:
                    if BaselineSpec(BASELINE_METHODS[m]).nuisance in need:
                        out[m] = MethodFit(m, None, error=f"{type(exc).__name__}: {exc}")
        for m in wanted:
            if m in out:
                continue
            spec = BaselineSpec(BASELINE_METHODS[m])
            nu = None
            if spec.nuisance == "alpha":
                nu = pair.alpha
            elif spec.nuisance == "gamma":
                nu = pair.gamma
            try:
                fit, caught = _capture(lambda: run_baseline(sub, spec, seed=seed + 31, nuisance=nu))
            except Exception as exc:  # noqa: BLE001
                out[m] = MethodFit(m, None, error=f"{type(exc).__name__}: {exc}")
                continue
            tun = dict(fit.tuning)
            if pair is not None and spec.nuisance is not None:
                tun[f"lambda_{spec.nuisance}"] = getattr(pair, f"lambda_{spec.nuisance}")
            out[m] = MethodFit(m, fit.coef.values, tun, caught)
    return {m: out[m] for m in methods}


def _fit_needed(sub, need, tuning, seed) -> NuisancePair:
    """Fit only the nuisances some baseline consumes; the other stays zero."""
    b_link = (tuning or DebiasTuning()).b_link
    alpha, gamma = SparseCoef.zeros(sub.d), SparseCoef.zeros(sub.d)
    lam_a = lam_g = 0.0
    if "alpha" in need:
        lam_a = tune_alpha(sub, seed=seed + 5)
        alpha = fit_alpha(sub, lam_a)
    if "gamma" in need:
        lam_g = tune_gamma(sub, b_link, seed=seed + 6)
        gamma = fit_gamma(sub, lam_g, b_link)
    return NuisancePair(alpha, gamma, b_link, sub.subgroup, lam_a, lam_g)
