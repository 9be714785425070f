"""Coefficient errors and validation scores (Brier skill, goodness of fit, AUC)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .solver import link_antiderivative, link_mean


class MetricError(ValueError):
    pass


def _vec(v):
    return np.asarray(getattr(v, "values", v), dtype=float)


def coef_error(beta_hat, beta_bar, norm="l2") -> float:
    """Distance between an estimate and the truth in the l1 or l2 norm."""
    a, b = _vec(beta_hat), _vec(beta_bar)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if norm == "l2":
        return float(np.linalg.norm(a - b))
    if norm == "l1":
        return float(np.sum(np.abs(a - b)))
    raise ValueError(f"unknown norm {norm!r}; expected 'l1' or 'l2'")


def _scores(beta, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    b = _vec(beta)
    if X.shape[1] != b.size:
        raise ValueError(f"rows have {X.shape[1]} columns, coefficients have {b.size}")
    return X @ b


def brier_skill(beta, X, y, link="logistic") -> float:
    """1 - mean squared error of g(x'beta) over the population variance of y."""
    y = np.asarray(y, dtype=float)
    var = float(np.mean((y - y.mean()) ** 2))
    if not var > 0:
        raise MetricError("Brier skill is undefined when every validation outcome is the same")
    pred = link_mean(link, _scores(beta, X))
    return 1.0 - float(np.mean((y - pred) ** 2)) / var


def goodness_of_fit(beta, X, y, link="logistic") -> float:
    """Negative-deviance score 1 - 2 mean(-y x'beta + G(x'beta))."""
    y = np.asarray(y, dtype=float)
    eta = _scores(beta, X)
    return 1.0 - 2.0 * float(np.mean(-y * eta + link_antiderivative(link, eta)))


def auc_scores(scores, y) -> float:
    """Mann-Whitney AUC with ties counted one half (midranks)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(y)
    pos = y == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise MetricError("AUC needs both outcome classes in the validation set")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def auc(beta, X, y) -> float:
    # the link is monotone, so ranking x'beta is enough
    return auc_scores(_scores(beta, X), y)


@dataclass
class EstimatorReport:
    method: str
    coef: np.ndarray
    replicate: int | None = None
    seed: int | None = None
    l1_err: float | None = None
    l2_err: float | None = None
    bss: float | None = None
    gof: float | None = None
    auc: float | None = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.l2_err is not None and self.l2_err < 0:
            raise ValueError("l2 error must be non-negative")
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValueError("AUC must lie in [0, 1]")

    @classmethod
    def simulation(cls, method, coef, truth, replicate=None, seed=None, warnings=()):
        return cls(method, _vec(coef), replicate, seed, coef_error(coef, truth, "l1"),
                   coef_error(coef, truth, "l2"), warnings=list(warnings))

    @classmethod
    def validation(cls, method, coef, X, y, link="logistic", warnings=()):
        return cls(method, _vec(coef), bss=brier_skill(coef, X, y, link),
                   gof=goodness_of_fit(coef, X, y, link), auc=auc(coef, X, y),
                   warnings=list(warnings))

    def to_dict(self):
        d = asdict(self)
        d["coef"] = [float(v) for v in self.coef]
        return d


def summarize(errors) -> dict:
    """Mean and standard error of the finite entries, plus counts."""
    e = np.asarray([np.nan if v is None else v for v in errors], dtype=float)
    ok = e[np.isfinite(e)]
    n_ok = int(ok.size)
    return {
        "mean_l2": float(ok.mean()) if n_ok else None,
        "se_l2": float(ok.std(ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else None,
        "n_ok": n_ok,
        "n_failed": int(e.size - n_ok),
    }
