"""Synthetic panels for the three simulation designs and their population targets.

Z = (1, Z_2, ..., Z_{q+p}) with independent standard normals truncated to
(-1.5, 1.5); X is the first q coordinates and W the remaining p. Outcome and
source membership are Bernoulli given (Z, R):

* Setting I: both nuisance models log-linear / logistic-linear in Z;
* Setting II: logistic-linear source model, non-linear outcome model;
* Setting III: logistic-linear outcome model, non-linear source model.

``R`` is independent of Z. Column indices below are 0-based, so Z_2 is
column 1 and Z_{q+1} (the first W) is column q.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .data import MAJORITY, MINORITY, SOURCE, TARGET, LabeledPanel, write_panel_csv
from .solver import link_derivative

TRUNC = 1.5


class InfeasibleDesign(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    setting: str = "I"
    q: int = 100
    p: int = 100
    t: int = 1
    n_s1: int = 3000
    n_s0: int = 400
    n_t1: int = 5000
    n_t0: int = 1000
    seed: int = 0
    # adversarial knobs for the majority outcome law (0/False: off)
    majority_permute: bool = False
    delta_dense: float = 0.0

    def __post_init__(self):
        if self.setting not in ("I", "II", "III"):
            raise ValueError(f"unknown setting {self.setting!r}")
        min_p = {"I": 3, "II": 1, "III": 2}[self.setting]
        if self.q < 4 or self.p < min_p:
            raise ValueError(f"setting {self.setting} needs q >= 4 and p >= {min_p}")
        if not 0 <= self.t <= self.p + self.q - 1:
            raise ValueError("t must lie in [0, p + q - 1]")
        for name in ("n_s1", "n_s0", "n_t1", "n_t0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def dim(self) -> int:
        return self.q + self.p

    def replace(self, **kw) -> SimConfig:
        d = asdict(self)
        d.update(kw)
        return SimConfig(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class TruthRecord:
    beta_bar_0: np.ndarray | None
    beta_bar_1: np.ndarray | None
    se_0: np.ndarray | None = None
    se_1: np.ndarray | None = None
    how_obtained: str = "oracle-monte-carlo"
    n_oracle: int = 0
    analytic: dict = field(default_factory=dict)

    def beta(self, r):
        return self.beta_bar_1 if r == MAJORITY else self.beta_bar_0

    def to_dict(self):
        conv = lambda a: None if a is None else [float(v) for v in a]
        return dict(beta_bar_0=conv(self.beta_bar_0), beta_bar_1=conv(self.beta_bar_1),
                    se_0=conv(self.se_0), se_1=conv(self.se_1),
                    how_obtained=self.how_obtained, n_oracle=self.n_oracle)


# ---------------------------------------------------------------------------
# model specification
# ---------------------------------------------------------------------------

def delta_vector(cfg: SimConfig) -> np.ndarray:
    d = np.zeros(cfg.dim)
    d[1:cfg.t + 1] = 0.2
    return d


def _dense_signs(q):
    return np.where(np.random.default_rng(20240917).random(q - 1) < 0.5, -1.0, 1.0)


def outcome_coef(cfg: SimConfig, r) -> np.ndarray | None:
    """Linear outcome coefficients on Z for subgroup r (None for Setting II)."""
    q = cfg.q
    if cfg.setting == "II":
        return None
    g = np.zeros(cfg.dim)
    if cfg.setting == "I":
        g[1:4] = 1.2
        g[q:q + 3] = (1.0, 0.8, 0.5)
    else:
        g[1:4] = (0.7, 0.9, 0.8)
        g[q:q + 2] = (0.75, -0.75)
    if r == MAJORITY:
        g = _majority_adjust(cfg, g)
    return g


def _majority_adjust(cfg, g):
    g = g + delta_vector(cfg)
    if cfg.majority_permute:
        g[1:cfg.q] = g[1:cfg.q][::-1].copy()
    if cfg.delta_dense:
        g[1:cfg.q] += cfg.delta_dense * _dense_signs(cfg.q)
    return g


def source_coef(cfg: SimConfig) -> np.ndarray | None:
    q = cfg.q
    a = np.zeros(cfg.dim)
    if cfg.setting == "I":
        a[1:4] = 0.2
        a[q:q + 3] = 0.5
        return a
    if cfg.setting == "II":
        a[1:3] = -1.0
        a[q] = 0.5
        return a
    return None


class _Cols:
    """Column access to Z, either a full matrix or a dict of columns."""

    def __init__(self, Z=None, cols=None, n=None):
        self.Z, self.cols = Z, cols
        self.n = Z.shape[0] if Z is not None else n

    def __getitem__(self, k):
        if k == 0:
            return np.ones(self.n)
        return self.Z[:, k] if self.Z is not None else self.cols[k]

    def dot(self, coef):
        out = np.zeros(self.n)
        for k in np.flatnonzero(coef):
            out += coef[k] * self[k]
        return out


def outcome_logit(cfg: SimConfig, Zc: _Cols, r) -> np.ndarray:
    if cfg.setting != "II":
        return Zc.dot(outcome_coef(cfg, r))
    q = cfg.q
    z1, z2, z3 = Zc[1], Zc[2], Zc[3]
    psi1 = -1.5 + 1.2 * (np.abs(z1) + 0.9 * z1) + 1.2 * (np.abs(z2) + 0.9 * z2) + 1.2 * z3
    if r == MINORITY:
        return psi1
    shift = 0.2 * z3 + 0.5 * Zc[q] + Zc.dot(delta_vector(cfg))
    if cfg.delta_dense:
        extra = np.zeros(cfg.dim)
        extra[1:q] = cfg.delta_dense * _dense_signs(q)
        shift = shift - Zc.dot(extra)
    return psi1 - shift


def source_logit(cfg: SimConfig, Zc: _Cols) -> np.ndarray:
    a = source_coef(cfg)
    if a is not None:
        return Zc.dot(a)
    q = cfg.q
    return -0.2 - 0.8 * Zc[1] * Zc[q] - 0.5 * Zc[2] * Zc[q + 1]


def relevant_columns(cfg: SimConfig, r) -> list[int]:
    """Z columns (excluding the constant) entering the outcome or source law."""
    q = cfg.q
    cols = set()
    g = outcome_coef(cfg, r)
    if g is not None:
        cols |= set(np.flatnonzero(g).tolist())
    else:
        cols |= {1, 2, 3}
        if r == MAJORITY:
            cols |= {q} | set(np.flatnonzero(delta_vector(cfg)).tolist())
            if cfg.delta_dense:
                cols |= set(range(1, q))
    a = source_coef(cfg)
    cols |= set(np.flatnonzero(a).tolist()) if a is not None else {1, 2, q, q + 1}
    cols.discard(0)
    return sorted(cols)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def truncated_normal(rng, size, lo=-TRUNC, hi=TRUNC):
    """Inverse-CDF draws from N(0, 1) restricted to (lo, hi)."""
    a, b = ndtr(lo), ndtr(hi)
    u = rng.random(size)
    return ndtri(a + u * (b - a))


def _draw_stratum(rng, cfg, s, n_needed, batch=4096, min_rate=1e-4):
    """Rows of Z with S = s, via accept/reject on P(S = 1 | Z)."""
    if n_needed == 0:
        return np.empty((0, cfg.dim))
    chunks, have, drawn = [], 0, 0
    while have < n_needed:
        Z = truncated_normal(rng, (batch, cfg.dim))
        Z[:, 0] = 1.0
        ps = expit(source_logit(cfg, _Cols(Z)))
        S = rng.random(batch) < ps
        keep = Z[S] if s == SOURCE else Z[~S]
        chunks.append(keep)
        have += keep.shape[0]
        drawn += batch
        if drawn >= 1_000_000 and have / drawn < min_rate:
            raise InfeasibleDesign(f"acceptance rate {have / drawn:.2g} for S={s} is below {min_rate}")
    return np.vstack(chunks)[:n_needed]


def generate(cfg: SimConfig, return_meta=False):
    """Draw one panel with exactly the configured stratum sizes.

    Source rows and target rows are drawn from the conditional covariate law
    given S; the first ``n_s1`` (``n_t1``) accepted rows become majority, the
    rest minority, which is valid because R is independent of Z.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    ZS = _draw_stratum(rng, cfg, SOURCE, cfg.n_s1 + cfg.n_s0)
    ZT = _draw_stratum(rng, cfg, TARGET, cfg.n_t1 + cfg.n_t0)
    Z = np.vstack([ZS, ZT])
    s = np.r_[np.ones(ZS.shape[0]), np.zeros(ZT.shape[0])].astype(int)
    r = np.r_[np.ones(cfg.n_s1), np.zeros(cfg.n_s0), np.ones(cfg.n_t1), np.zeros(cfg.n_t0)].astype(int)
    logit = np.empty(Z.shape[0])
    for rr in (MAJORITY, MINORITY):
        m = r == rr
        logit[m] = outcome_logit(cfg, _Cols(Z[m]), rr)
    u = rng.random(Z.shape[0])
    y = (u < expit(logit)).astype(float)
    y[s == TARGET] = np.nan
    panel = LabeledPanel(s, r, y, Z[:, :cfg.q], Z[:, cfg.q:])
    if not return_meta:
        return panel
    meta = {"config": cfg.to_dict(), "prob_y": expit(logit)}
    return panel, meta


def replicate_seed(root, replicate) -> int:
    """Independent seed for replicate ``replicate`` of campaign ``root``."""
    return int(np.random.SeedSequence([int(root), int(replicate)]).generate_state(1, np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# population targets
# ---------------------------------------------------------------------------

def _target_sample(cfg, r, n, rng, cols, batch=200_000):
    """Target-population draws of the relevant columns, plus E[Y | Z]."""
    got = {k: [] for k in cols}
    means, have = [], 0
    while have < n:
        C = {k: truncated_normal(rng, batch) for k in cols}
        Zc = _Cols(cols=C, n=batch)
        ps = expit(source_logit(cfg, Zc))
        keep = rng.random(batch) >= ps
        Zk = _Cols(cols={k: v[keep] for k, v in C.items()}, n=int(keep.sum()))
        means.append(expit(outcome_logit(cfg, Zk, r)))
        for k in cols:
            got[k].append(Zk[k])
        have += Zk.n
    m = np.concatenate(means)[:n]
    return {k: np.concatenate(v)[:n] for k, v in got.items()}, m


def solve_logistic_population(X, m, tol=1e-12, max_iter=100):
    """Root of avg[x (expit(x'b) - m)] by damped Newton; returns (b, se)."""
    n, d = X.shape
    b = np.zeros(d)
    b[0] = np.log(m.mean() / (1 - m.mean()))
    for _ in range(max_iter):
        eta = X @ b
        mu = expit(eta)
        grad = X.T @ (mu - m) / n
        H = (X * link_derivative("logistic", eta)[:, None]).T @ X / n
        step = np.linalg.solve(H, grad)
        t = 1.0
        f0 = np.mean(np.logaddexp(0, eta) - m * eta)
        while t > 1e-8:
            e2 = X @ (b - t * step)
            if np.mean(np.logaddexp(0, e2) - m * e2) <= f0 + 1e-12:
                break
            t *= 0.5
        b = b - t * step
        if np.max(np.abs(t * step)) < tol:
            break
    else:
        raise RuntimeError("population Newton solve did not converge")
    eta = X @ b
    score = X * (expit(eta) - m)[:, None]
    H = (X * link_derivative("logistic", eta)[:, None]).T @ X / n
    Hi = np.linalg.inv(H)
    cov = Hi @ np.cov(score, rowvar=False).reshape(d, d) @ Hi / n
    return b, np.sqrt(np.diag(cov))


def compute_truth(cfg: SimConfig, n_oracle=1_000_000, seed=None, subgroups=(MINORITY, MAJORITY)):
    """Population target coefficients by oracle Monte Carlo.

    Target-population covariates are drawn by rejection from the source law,
    and the outcome enters through its exact conditional mean, which has the
    same population root as sampled outcomes but less Monte Carlo noise.
    Coordinates of X outside the outcome and source laws are independent of
    everything else and mean zero, so their target coefficient is exactly 0;
    only the remaining coordinates are solved for.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
    out = {}
    for r in (MINORITY, MAJORITY):
        if r not in subgroups:
            out[r] = (None, None)
            continue
        cols = relevant_columns(cfg, r)
        C, m = _target_sample(cfg, r, n_oracle, rng, cols)
        xcols = [k for k in cols if k < cfg.q]
        X = np.column_stack([np.ones(n_oracle)] + [C[k] for k in xcols])
        b, se = solve_logistic_population(X, m)
        beta = np.zeros(cfg.q)
        ses = np.zeros(cfg.q)
        beta[[0] + xcols] = b
        ses[[0] + xcols] = se
        out[r] = (beta, ses)
    return TruthRecord(out[MINORITY][0], out[MAJORITY][0], out[MINORITY][1], out[MAJORITY][1],
                       n_oracle=int(n_oracle))


def write_simulation(cfg: SimConfig, panel: LabeledPanel, truth: TruthRecord | None, path) -> str:
    """Write the panel as CSV and its config and truth to ``<path>.json``.

    Returns the sidecar path.
    """
    path = str(path)
    write_panel_csv(panel, path)
    meta = {"config": cfg.to_dict(), "truth": None if truth is None else truth.to_dict()}
    side = path[:-4] + ".json" if path.endswith(".csv") else path + ".json"
    with open(side, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return side
