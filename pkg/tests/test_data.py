from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from makeup.data import (IDENTITY_BASIS, MAJORITY, MINORITY, SOURCE, TARGET, BasisMap,
                         LabeledPanel, PanelError, build_panel, expand_basis, read_labeled_csv,
                         read_panel_csv, stratum_mean, write_panel_csv)


def _four_rows():
    return [(SOURCE, MAJORITY, 1.0, [1.0, 0.2], [0.5]),
            (SOURCE, MINORITY, 0.0, [1.0, -0.1], [0.0]),
            (TARGET, MAJORITY, None, [1.0, 0.3], [1.5]),
            (TARGET, MINORITY, None, [1.0, 0.9], [-0.5])]


def test_minimal_panel_counts():
    panel = build_panel(_four_rows())
    assert panel.counts() == {"n_s0": 1, "n_s1": 1, "n_t0": 1, "n_t1": 1}
    assert (panel.q, panel.p, len(panel)) == (2, 1, 4)


def test_rejects_labeled_target_row():
    rows = _four_rows()
    rows[2] = (TARGET, MAJORITY, 1.0, [1.0, 0.3], [1.5])
    with pytest.raises(PanelError, match="target row"):
        build_panel(rows)


def test_rejects_unlabeled_source_row():
    rows = _four_rows()
    rows[0] = (SOURCE, MAJORITY, None, [1.0, 0.2], [0.5])
    with pytest.raises(PanelError, match="source row"):
        build_panel(rows)


def test_rejects_ragged_x():
    rows = [(SOURCE, MINORITY, 1.0, [1.0, 0.1, 0.2], []),
            (SOURCE, MINORITY, 0.0, [1.0, 0.1, 0.2, 0.3], [])]
    with pytest.raises(PanelError, match="length"):
        build_panel(rows)


def test_rejects_missing_intercept():
    rows = _four_rows()
    rows[1] = (SOURCE, MINORITY, 0.0, [0.5, -0.1], [0.0])
    with pytest.raises(PanelError, match="x\\[0\\]"):
        build_panel(rows)


def test_p_zero_allowed():
    panel = build_panel([(SOURCE, MINORITY, 1.0, [1.0, 2.0], []),
                         (TARGET, MINORITY, None, [1.0, 3.0], [])])
    assert panel.p == 0
    assert expand_basis(panel).shape == (2, 2)


def test_panel_is_read_only():
    panel = build_panel(_four_rows())
    with pytest.raises(ValueError):
        panel.X[0, 1] = 3.0


def test_require_names_stratum():
    panel = build_panel(_four_rows()[:2])
    with pytest.raises(PanelError, match="target-minority"):
        panel.require(TARGET, MINORITY)


def test_stratum_mean_examples():
    rows = [(SOURCE, MINORITY, 0.0, [1.0, 0.0], []),
            (SOURCE, MINORITY, 1.0, [1.0, 2.0], []),
            (SOURCE, MINORITY, 1.0, [1.0, 4.0], []),
            (TARGET, MINORITY, None, [1.0, 5.0], [])]
    panel = build_panel(rows)
    src = panel.view(SOURCE, MINORITY)
    assert stratum_mean(panel, src, lambda o: 1.0) == 1.0
    assert stratum_mean(panel, src, lambda o: o.y) == pytest.approx(2 / 3)
    two = panel.view(SOURCE, MINORITY)
    two = type(two)(two.indices[:2], SOURCE, MINORITY)
    np.testing.assert_allclose(stratum_mean(panel, two, lambda o: o.x), [1.0, 1.0])


def test_stratum_mean_empty_view_names_stratum():
    panel = build_panel(_four_rows()[:2])
    with pytest.raises(PanelError, match="target-majority"):
        stratum_mean(panel, panel.view(TARGET, MAJORITY), lambda o: 1.0)


def test_expand_basis_examples():
    panel = build_panel([(SOURCE, MINORITY, 1.0, [1.0, 0.5], [-0.2])])
    np.testing.assert_array_equal(expand_basis(panel)[0], [1.0, 0.5, -0.2])
    sq = BasisMap(lambda z: np.r_[z, z ** 2], d=4)
    panel2 = build_panel([(SOURCE, MINORITY, 1.0, [1.0, 2.0], [])])
    np.testing.assert_array_equal(expand_basis(panel2, sq)[0], [1, 2, 1, 4])


def test_expand_basis_wrong_length():
    bad = BasisMap(lambda z: z[:1], d=3)
    panel = build_panel(_four_rows())
    with pytest.raises(ValueError, match="declared"):
        expand_basis(panel, bad)


def test_csv_round_trip(tmp_path, rng):
    from conftest import make_shift_panel

    panel = make_shift_panel(rng, n_s=10, n_t=8, q=3, p=2)
    path = tmp_path / "panel.csv"
    write_panel_csv(panel, path)
    assert read_panel_csv(path) == panel
    X, y = read_labeled_csv(path, 3)
    np.testing.assert_array_equal(X, panel.X)
    assert np.isnan(y[panel.s == TARGET]).all()


def test_csv_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("S,R,Y,X1,X2\n1,0,1,1,0.5\n0,0,1,1,0.2\n")
    with pytest.raises(PanelError, match=":3:"):
        read_panel_csv(path)
    path.write_text("S,R,Y,X1,X3\n1,0,1,1,0.5\n")
    with pytest.raises(PanelError, match="X2 missing"):
        read_panel_csv(path)
    path.write_text("S,R,X1\n")
    with pytest.raises(PanelError, match="missing column Y"):
        read_panel_csv(path)


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

panels = st.integers(0, 10_000).map(
    lambda seed: _random_panel(np.random.default_rng(seed)))


def _random_panel(rng, n=30, q=3, p=2):
    s = rng.integers(0, 2, n)
    r = rng.integers(0, 2, n)
    y = np.where(s == SOURCE, rng.integers(0, 2, n), np.nan)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, q - 1))])
    return LabeledPanel(s, r, y, X, rng.standard_normal((n, p)))


@settings(max_examples=30, deadline=None)
@given(panel=panels, c=st.floats(-5, 5), s=st.sampled_from([SOURCE, TARGET, None]),
       r=st.sampled_from([MAJORITY, MINORITY, None]))
def test_stratum_mean_linear(panel, c, s, r):
    view = panel.view(s, r)
    if view.n == 0:
        return
    f = lambda o: o.x
    g = lambda o: np.r_[o.w, o.x[:1]]
    lhs = stratum_mean(panel, view, lambda o: f(o) + c * g(o))
    rhs = stratum_mean(panel, view, f) + c * stratum_mean(panel, view, g)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(panel=panels)
def test_strata_partition_rows(panel):
    assert sum(panel.counts().values()) == len(panel)


@settings(max_examples=30, deadline=None)
@given(panel=panels)
def test_identity_basis_recovers_x_and_w(panel):
    Phi = expand_basis(panel, IDENTITY_BASIS)
    np.testing.assert_array_equal(Phi[:, :panel.q], panel.X)
    np.testing.assert_array_equal(Phi[:, panel.q:], panel.W)
