"""Panel data model: four strata (source/target x majority/minority).

Rows are stored column-wise in dense arrays. Outcomes exist only on source
rows; target rows carry NaN internally and an empty field in CSV files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

SOURCE, TARGET = 1, 0
MAJORITY, MINORITY = 1, 0

_S_NAMES = {SOURCE: "source", TARGET: "target"}
_R_NAMES = {MAJORITY: "majority", MINORITY: "minority"}


class PanelError(ValueError):
    """Raised for malformed panels or CSV input."""


def stratum_name(s=None, r=None):
    parts = []
    if s is not None:
        parts.append(_S_NAMES[s])
    if r is not None:
        parts.append(_R_NAMES[r])
    return "-".join(parts) or "all rows"


@dataclass(frozen=True)
class Observation:
    s: int
    r: int
    y: float | None
    x: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class StratumView:
    indices: np.ndarray
    s: int | None = None
    r: int | None = None

    @property
    def n(self) -> int:
        return int(self.indices.size)

    @property
    def name(self) -> str:
        return stratum_name(self.s, self.r)

    def mean(self, values):
        """Row average of a per-row array (first axis indexed by panel row)."""
        if self.n == 0:
            raise PanelError(f"stratum {self.name} is empty")
        return np.asarray(values)[self.indices].mean(axis=0)


class LabeledPanel:
    """Validated, read-only panel.

    Parameters
    ----------
    s, r : array of {0, 1}
        Source indicator (1 = source) and subgroup indicator (1 = majority).
    y : array
        Outcomes; NaN on target rows.
    X : (n, q) array
        Risk factors, first column identically 1.
    W : (n, p) array
        Auxiliary covariates; ``p`` may be 0.
    """

    def __init__(self, s, r, y, X, W=None):
        s = np.asarray(s, dtype=np.int8).ravel()
        r = np.asarray(r, dtype=np.int8).ravel()
        y = np.asarray(y, dtype=float).ravel()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = s.size
        if W is None:
            W = np.empty((n, 0))
        W = np.asarray(W, dtype=float).reshape(n, -1) if n else np.empty((0, np.shape(W)[-1]))
        if not (r.size == y.size == X.shape[0] == W.shape[0] == n):
            raise PanelError("s, r, y, X and W must have the same number of rows")
        if X.shape[1] < 1:
            raise PanelError("X needs at least the intercept column")
        if not np.isin(s, (0, 1)).all() or not np.isin(r, (0, 1)).all():
            raise PanelError("S and R must be 0/1 indicators")
        src = s == SOURCE
        bad = np.flatnonzero(src & ~np.isfinite(y))
        if bad.size:
            raise PanelError(f"source row {bad[0]} has no finite outcome")
        bad = np.flatnonzero(~src & ~np.isnan(y))
        if bad.size:
            raise PanelError(f"target row {bad[0]} carries an outcome")
        bad = np.flatnonzero(X[:, 0] != 1.0)
        if bad.size:
            raise PanelError(f"row {bad[0]} has x[0] = {X[bad[0], 0]!r}, expected 1")
        if not (np.isfinite(X).all() and np.isfinite(W).all()):
            raise PanelError("covariates must be finite")
        for a in (s, r, y, X, W):
            a.setflags(write=False)
        self.s, self.r, self.y, self.X, self.W = s, r, y, X, W

    @property
    def n(self) -> int:
        return self.s.size

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.W.shape[1]

    @property
    def Z(self) -> np.ndarray:
        return np.hstack([self.X, self.W])

    def __len__(self):
        return self.n

    @property
    def rows(self) -> list[Observation]:
        return [self.row(i) for i in range(self.n)]

    def row(self, i) -> Observation:
        yi = None if self.s[i] == TARGET else float(self.y[i])
        return Observation(int(self.s[i]), int(self.r[i]), yi, self.X[i], self.W[i])

    def view(self, s=None, r=None) -> StratumView:
        mask = np.ones(self.n, dtype=bool)
        if s is not None:
            mask &= self.s == s
        if r is not None:
            mask &= self.r == r
        return StratumView(np.flatnonzero(mask), s, r)

    def count(self, s, r) -> int:
        return int(np.sum((self.s == s) & (self.r == r)))

    def counts(self) -> dict[str, int]:
        return {
            "n_s0": self.count(SOURCE, MINORITY),
            "n_s1": self.count(SOURCE, MAJORITY),
            "n_t0": self.count(TARGET, MINORITY),
            "n_t1": self.count(TARGET, MAJORITY),
        }

    def require(self, s, r, min_rows=1):
        if self.count(s, r) < min_rows:
            raise PanelError(
                f"stratum {stratum_name(s, r)} has {self.count(s, r)} rows, need at least {min_rows}"
            )

    def subset(self, indices) -> LabeledPanel:
        idx = np.asarray(indices)
        return LabeledPanel(self.s[idx], self.r[idx], self.y[idx], self.X[idx], self.W[idx])

    def __eq__(self, other):
        if not isinstance(other, LabeledPanel):
            return NotImplemented
        return all(
            np.array_equal(a, b, equal_nan=True)
            for a, b in zip((self.s, self.r, self.y, self.X, self.W),
                            (other.s, other.r, other.y, other.X, other.W))
        ) and self.X.shape == other.X.shape and self.W.shape == other.W.shape

    __hash__ = None


def build_panel(rows: Iterable) -> LabeledPanel:
    """Validate raw ``(s, r, y, x, w)`` tuples into a panel."""
    rows = list(rows)
    if not rows:
        raise PanelError("no rows")
    q = len(rows[0][3])
    p = len(rows[0][4])
    s, r, y, X, W = [], [], [], [], []
    for i, (si, ri, yi, xi, wi) in enumerate(rows):
        if len(xi) != q:
            raise PanelError(f"row {i}: x has length {len(xi)}, expected {q}")
        if len(wi) != p:
            raise PanelError(f"row {i}: w has length {len(wi)}, expected {p}")
        if si == SOURCE and yi is None:
            raise PanelError(f"row {i}: source row without outcome")
        if si == TARGET and yi is not None:
            raise PanelError(f"row {i}: target row carries an outcome")
        s.append(si)
        r.append(ri)
        y.append(np.nan if yi is None else yi)
        X.append(xi)
        W.append(wi)
    return LabeledPanel(s, r, y, np.array(X, dtype=float).reshape(len(rows), q),
                        np.array(W, dtype=float).reshape(len(rows), p))


def stratum_mean(panel: LabeledPanel, view: StratumView,
                 f: Callable[[Observation], np.ndarray]) -> np.ndarray:
    """Average of a per-row functional over a stratum."""
    if view.n == 0:
        raise PanelError(f"stratum {view.name} is empty")
    acc = None
    for i in view.indices:
        v = np.asarray(f(panel.row(i)), dtype=float)
        acc = v.copy() if acc is None else acc + v
    return acc / view.n


@dataclass(frozen=True)
class BasisMap:
    """Feature map phi(z) applied row-wise to z = (x, w).

    ``transform=None`` is the identity. A user transform is a pure function of
    one row returning a vector of length ``d``.
    """

    transform: Callable[[np.ndarray], np.ndarray] | None = None
    d: int | None = None

    @property
    def kind(self) -> str:
        return "identity" if self.transform is None else "user"

    def output_dim(self, dim_z) -> int:
        if self.transform is None:
            return dim_z
        if self.d is None:
            raise ValueError("a user-supplied transform needs its output dimension d")
        return self.d

    def apply(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if self.transform is None:
            return Z.copy()
        d = self.output_dim(Z.shape[1])
        out = np.empty((Z.shape[0], d))
        for i, z in enumerate(Z):
            v = np.asarray(self.transform(z), dtype=float).ravel()
            if v.size != d:
                raise ValueError(f"basis transform returned length {v.size}, declared {d}")
            out[i] = v
        return out


IDENTITY_BASIS = BasisMap()


def expand_basis(panel: LabeledPanel, basis: BasisMap = IDENTITY_BASIS) -> np.ndarray:
    return basis.apply(panel.Z)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _parse_header(header, path):
    cols = {name.strip(): k for k, name in enumerate(header)}
    for req in ("S", "R", "Y"):
        if req not in cols:
            raise PanelError(f"{path}: missing column {req}")
    xs = _numbered(cols, "X", path)
    ws = _numbered(cols, "W", path)
    if not xs:
        raise PanelError(f"{path}: no X1.. columns")
    return cols, xs, ws


def _numbered(cols, prefix, path):
    idx = []
    k = 1
    while f"{prefix}{k}" in cols:
        idx.append(cols[f"{prefix}{k}"])
        k += 1
    extra = [c for c in cols if c.startswith(prefix) and c[len(prefix):].isdigit()
             and int(c[len(prefix):]) >= k]
    if extra:
        raise PanelError(f"{path}: column {extra[0]} present but {prefix}{k} missing")
    return idx


def read_panel_csv(path) -> LabeledPanel:
    """Read a panel in the S,R,Y,X1..Xq,W1..Wp layout."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        cols, xs, ws = _parse_header(header, path)
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise PanelError(f"{path}:{line_no}: expected {len(header)} fields, got {len(rec)}")
            try:
                s = int(rec[cols["S"]])
                r = int(rec[cols["R"]])
                ytxt = rec[cols["Y"]].strip()
                y = float(ytxt) if ytxt else None
                x = [float(rec[k]) for k in xs]
                w = [float(rec[k]) for k in ws]
            except ValueError as exc:
                raise PanelError(f"{path}:{line_no}: {exc}") from None
            if s not in (0, 1) or r not in (0, 1):
                raise PanelError(f"{path}:{line_no}: S and R must be 0 or 1")
            if s == SOURCE and y is None:
                raise PanelError(f"{path}:{line_no}: source row without Y")
            if s == TARGET and y is not None:
                raise PanelError(f"{path}:{line_no}: target row with Y")
            if x[0] != 1.0:
                raise PanelError(f"{path}:{line_no}: X1 must be 1")
            rows.append((s, r, y, x, w))
    if not rows:
        raise PanelError(f"{path}: no data rows")
    return build_panel(rows)


def write_panel_csv(panel: LabeledPanel, path):
    header = ["S", "R", "Y"] + [f"X{k + 1}" for k in range(panel.q)] + [f"W{k + 1}" for k in range(panel.p)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for i in range(panel.n):
            y = "" if panel.s[i] == TARGET else repr(float(panel.y[i]))
            wr.writerow([int(panel.s[i]), int(panel.r[i]), y]
                        + [repr(float(v)) for v in panel.X[i]]
                        + [repr(float(v)) for v in panel.W[i]])


def read_labeled_csv(path, q=None):
    """Read rows for prediction or evaluation: returns (X, y or None).

    Only X1..Xq (and optional W, Y) are used; S and R are not required.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        cols = {name.strip(): k for k, name in enumerate(header)}
        xs = _numbered(cols, "X", path)
        if not xs:
            raise PanelError(f"{path}: no X1.. columns")
        if q is not None and len(xs) != q:
            raise PanelError(f"{path}: has {len(xs)} X columns, model expects {q}")
        X, y = [], []
        has_y = "Y" in cols
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise PanelError(f"{path}:{line_no}: expected {len(header)} fields, got {len(rec)}")
            try:
                X.append([float(rec[k]) for k in xs])
                if has_y:
                    ytxt = rec[cols["Y"]].strip()
                    y.append(float(ytxt) if ytxt else np.nan)
            except ValueError as exc:
                raise PanelError(f"{path}:{line_no}: {exc}") from None
    X = np.array(X, dtype=float).reshape(-1, len(xs))
    return X, (np.array(y) if has_y else None)
