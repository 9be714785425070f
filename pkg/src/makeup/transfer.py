"""Majority-guided thresholding and the cross-fitted ensemble.

The knowledge-transfer estimate for the minority is the majority's sparse
fit plus a thresholded difference,

    KTr = Thr_maj + Thre(Deb_min - Thr_maj, tau_KTr),

which is accurate when the two subgroup models differ in few coordinates.
To guard against a dissimilar majority, the minority data are split in two;
each fold's minority-only and transfer estimates are scored against the
other fold's debiased vector and mixed with exponential weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import IDENTITY_BASIS, MAJORITY, MINORITY, BasisMap, LabeledPanel, PanelError
from .debias import (TAU_MULTIPLIERS, DebiasBundle, DebiasTuning, debias_subgroup,
                     stable_tau, tau_grid, threshold_vector)
from .nuisance import SubgroupData
from .solver import SparseCoef

logger = logging.getLogger(__name__)

FULL_MULTIPLIERS = (0.5, 0.75, 1.0, 1.41, 2.0)


@dataclass
class TransferInputs:
    beta_deb_minority: np.ndarray
    beta_thr_majority: np.ndarray
    tau_ktr: float

    def __post_init__(self):
        a = np.asarray(self.beta_deb_minority, dtype=float)
        b = np.asarray(getattr(self.beta_thr_majority, "values", self.beta_thr_majority), dtype=float)
        if a.shape != b.shape:
            raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
        self.beta_deb_minority, self.beta_thr_majority = a, b


@dataclass
class TransferOptions:
    """Knobs of the ensemble.

    ``threshold_intercept_difference`` also thresholds the intercept of the
    majority-minority difference inside the ensemble. ``full_multipliers``
    is the capped grid used for the full-minority minority-only estimate,
    whose support only settles once every signal is zeroed on the wider
    grid. ``resparsify`` re-thresholds the final average at the mean fold
    tau.
    """

    temperature: float = 5.0
    multipliers: tuple = TAU_MULTIPLIERS
    full_multipliers: tuple = FULL_MULTIPLIERS
    threshold_intercept_difference: bool = True
    resparsify: bool = False
    full_minority: bool = True


@dataclass
class FoldResult:
    bundle: DebiasBundle
    thr: SparseCoef
    ktr: SparseCoef
    tau: float
    tau_ktr: float
    q_thr: float
    q_ktr: float
    weight: float


@dataclass
class EnsembleResult:
    beta_mu: SparseCoef
    fold_weights: list
    fold_estimates: list
    temperature: float
    majority: DebiasBundle | None = None
    beta_thr_majority: SparseCoef | None = None
    tau_majority: float | None = None
    minority_full: DebiasBundle | None = None
    beta_min_only: SparseCoef | None = None
    beta_maj_guided: SparseCoef | None = None
    tau_min_only: float | None = None
    tau_maj_guided: float | None = None
    folds: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "fold_weights": [float(w) for w in self.fold_weights],
            "temperature": self.temperature,
            "tau_majority": self.tau_majority,
            "fold_tau": [f.tau for f in self.folds],
            "fold_tau_ktr": [f.tau_ktr for f in self.folds],
            "tau_min_only": self.tau_min_only,
            "tau_maj_guided": self.tau_maj_guided,
        }


def knowledge_transfer(inputs: TransferInputs, threshold_intercept=False) -> SparseCoef:
    """Majority fit plus the hard-thresholded minority-majority difference."""
    if not inputs.tau_ktr > 0:
        raise ValueError("tau_ktr must be positive")
    diff = inputs.beta_deb_minority - inputs.beta_thr_majority
    keep = () if threshold_intercept else (0,)
    delta = threshold_vector(diff, inputs.tau_ktr, keep=keep).values
    return SparseCoef(inputs.beta_thr_majority + delta)


def surrogate_loss(beta, reference) -> float:
    """Squared Euclidean distance to an independent debiased vector."""
    b = np.asarray(getattr(beta, "values", beta), dtype=float)
    r = np.asarray(reference, dtype=float)
    if b.shape != r.shape:
        raise ValueError("surrogate loss needs vectors of equal length")
    return float(np.sum((b - r) ** 2))


def exponential_weight(q_thr, q_ktr, temperature=5.0) -> float:
    """Weight on the minority-only estimate, exp(-a Q_thr) / (exp(-a Q_thr) + exp(-a Q_ktr))."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    # the two-term softmax is a logistic function of the loss gap
    return float(expit(temperature * (q_ktr - q_thr)))


def split_minority(panel: LabeledPanel, seed, basis: BasisMap = IDENTITY_BASIS, Phi=None):
    """Two halves of the minority, each keeping its share of source and target rows."""
    sub = SubgroupData.from_panel(panel, MINORITY, basis, Phi)
    if sub.n_S < 4 or sub.n_T < 4:
        raise PanelError("the minority needs at least 4 source and 4 target rows to form two folds")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    ps, pt = rng.permutation(sub.n_S), rng.permutation(sub.n_T)
    hs, ht = sub.n_S // 2, sub.n_T // 2
    return sub, [sub.take(np.sort(ps[:hs]), np.sort(pt[:ht])),
                 sub.take(np.sort(ps[hs:]), np.sort(pt[ht:]))]


def _fold_losses(deb, reference, grid, keep=(0,)):
    return np.array([surrogate_loss(threshold_vector(deb, t, keep), reference) for t in grid])


def _ktr_losses(deb, thr_maj, reference, grid, threshold_intercept):
    return np.array([surrogate_loss(knowledge_transfer(TransferInputs(deb, thr_maj, t),
                                                       threshold_intercept), reference)
                     for t in grid])


def stable_transfer_tau(deb, thr_maj, grid, threshold_intercept=False) -> float:
    """Smallest grid tau at which the transferred difference keeps the next tau's support."""
    grid = np.sort(np.atleast_1d(np.asarray(grid, dtype=float)))
    base = np.asarray(getattr(thr_maj, "values", thr_maj), dtype=float)
    supports = [tuple(np.flatnonzero(knowledge_transfer(TransferInputs(deb, base, t),
                                                        threshold_intercept).values - base))
                for t in grid]
    for k in range(grid.size - 1):
        if supports[k] == supports[k + 1]:
            return float(grid[k])
    return float(grid[-1])


def run_algorithm3(panel: LabeledPanel, basis: BasisMap = IDENTITY_BASIS,
                   tuning: DebiasTuning | None = None, temperature=None, seed=0,
                   options: TransferOptions | None = None, majority_tuning=None,
                   config=None) -> EnsembleResult:
    """Cross-fitted transfer estimate for the minority subgroup.

    The majority is debiased once on all its rows and thresholded at the
    smallest grid tau with a stable support. Each minority fold is debiased
    separately; its thresholds (minority-only and transfer) are chosen by the
    surrogate loss against the other fold's debiased vector, and the two
    fold estimates are mixed with exponential weights.

    With ``options.full_minority`` the whole minority is also debiased to
    report the minority-only and (unprotected) transfer estimates. No held-out
    reference exists for them, so each takes the smallest tau whose support
    is stable: the thresholded vector on the capped ``full_multipliers`` grid,
    and the transferred difference on the ensemble grid.
    """
    options = options or TransferOptions()
    a = options.temperature if temperature is None else temperature
    Phi = basis.apply(panel.Z)
    sub_full, folds = split_minority(panel, seed, basis, Phi)
    notes = []

    sub1 = SubgroupData.from_panel(panel, MAJORITY, basis, Phi)
    maj = debias_subgroup(sub1, majority_tuning or tuning, seed=seed + 101, config=config)
    grid1 = tau_grid(maj.n_r, sub1.q, options.multipliers, maj.noise_scale)
    tau1 = stable_tau(maj.beta_deb, grid1)
    thr1 = threshold_vector(maj.beta_deb, tau1)
    notes += [f"majority: {m}" for m in maj.warnings]

    bundles = []
    for k, fs in enumerate(folds):
        b = debias_subgroup(fs, tuning, seed=seed + 11 * (k + 1), config=config)
        bundles.append(b)
        notes += [f"fold {k + 1}: {m}" for m in b.warnings]

    mult = np.asarray(options.multipliers, dtype=float)
    thr_loss = np.zeros((2, mult.size))
    ktr_loss = np.zeros((2, mult.size))
    grids = []
    for k in range(2):
        b, ref = bundles[k], bundles[1 - k].beta_deb
        g = tau_grid(b.n_r, sub1.q, mult, b.noise_scale)
        grids.append(g)
        thr_loss[k] = _fold_losses(b.beta_deb, ref, g)
        ktr_loss[k] = _ktr_losses(b.beta_deb, thr1.values, ref, g,
                                  options.threshold_intercept_difference)

    fold_results = []
    for k in range(2):
        b, ref = bundles[k], bundles[1 - k].beta_deb
        i_thr = int(np.argmin(thr_loss[k]))
        i_ktr = int(np.argmin(ktr_loss[k]))
        tau, tau_k = float(grids[k][i_thr]), float(grids[k][i_ktr])
        thr = threshold_vector(b.beta_deb, tau)
        ktr = knowledge_transfer(TransferInputs(b.beta_deb, thr1.values, tau_k),
                                 options.threshold_intercept_difference)
        q_thr, q_ktr = surrogate_loss(thr, ref), surrogate_loss(ktr, ref)
        w = exponential_weight(q_thr, q_ktr, a)
        fold_results.append(FoldResult(b, thr, ktr, tau, tau_k, q_thr, q_ktr, w))

    mu = np.mean([f.weight * f.thr.values + (1 - f.weight) * f.ktr.values
                  for f in fold_results], axis=0)
    if options.resparsify:
        mu = threshold_vector(mu, float(np.mean([f.tau for f in fold_results]))).values

    result = EnsembleResult(
        beta_mu=SparseCoef(mu),
        fold_weights=[f.weight for f in fold_results],
        fold_estimates=[(f.thr, f.ktr) for f in fold_results],
        temperature=a, majority=maj, beta_thr_majority=thr1, tau_majority=tau1,
        folds=fold_results, warnings=notes,
    )
    if options.full_minority:
        full = debias_subgroup(sub_full, tuning, seed=seed + 7, config=config)
        ti = options.threshold_intercept_difference
        tau_thr = stable_tau(full.beta_deb, tau_grid(full.n_r, sub1.q, options.full_multipliers,
                                                     full.noise_scale))
        tau_ktr = stable_transfer_tau(full.beta_deb, thr1.values,
                                      tau_grid(full.n_r, sub1.q, mult, full.noise_scale), ti)
        result.minority_full = full
        result.tau_min_only, result.tau_maj_guided = tau_thr, tau_ktr
        result.beta_min_only = threshold_vector(full.beta_deb, tau_thr)
        result.beta_maj_guided = knowledge_transfer(
            TransferInputs(full.beta_deb, thr1.values, tau_ktr), ti)
        notes += [f"full minority: {m}" for m in full.warnings]
    return result
