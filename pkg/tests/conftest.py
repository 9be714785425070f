from __future__ import annotations

import os
import sys
import warnings

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from makeup.data import build_panel  # noqa: E402


@pytest.fixture(autouse=True)
def _quiet_runtime_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def make_shift_panel(rng, n_s=400, n_t=400, q=4, p=1, shift=0.5, coef=None, majority=True):
    """Small logistic panel with a mean shift between source and target rows."""
    coef = np.r_[-0.2, 0.8, -0.5, np.zeros(q + p - 3)] if coef is None else coef
    rows = []
    groups = (0, 1) if majority else (0,)
    for r in groups:
        for s, n, mu in ((1, n_s, 0.0), (0, n_t, shift)):
            Z = rng.standard_normal((n, q + p - 1)) + mu
            Z = np.column_stack([np.ones(n), Z])
            pr = 1 / (1 + np.exp(-(Z @ coef)))
            ys = rng.random(n) < pr
            for i in range(n):
                y = float(ys[i]) if s == 1 else None
                rows.append((s, r, y, Z[i, :q], Z[i, q:]))
    return build_panel(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import report

    if report.LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(report.LINES):
            terminalreporter.write_line(report.LINES[k])
