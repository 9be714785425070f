from __future__ import annotations

import csv
import json

import numpy as np
import pytest
from scipy.special import logit

from makeup.cli import (ConfigError, RunConfig, cmd_evaluate, cmd_fit, cmd_predict, cmd_simulate,
                        load_model, main, read_results)
from makeup.data import LabeledPanel, PanelError, write_panel_csv
from makeup.simgen import SimConfig, generate

SIM = dict(setting="I", q=5, p=4, t=1, n_s1=60, n_s0=80, n_t1=60, n_t0=100)


def _campaign(out, **kw):
    base = dict(sim=SIM, replicates=2, methods=("naive",), seed=7, n_oracle=100_000, out=str(out))
    base.update(kw)
    return RunConfig(**base)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


def _model(path, entries):
    path.write_text(json.dumps({m: {"coef": c, "tuning": {"g_link": link}}
                                for m, (c, link) in entries.items()}))
    return str(path)


def test_one_replicate_one_row(tmp_path, capsys):
    out = cmd_simulate(_campaign(tmp_path / "c", replicates=1))
    rows = read_results(f"{out}/results.csv")
    assert len(rows) == 1 and rows[0]["method"] == "naive" and rows[0]["status"] == "ok"
    summary = json.loads(open(f"{out}/summary.json").read())
    assert summary["naive"]["n_ok"] == 1


def test_rerun_is_byte_identical(tmp_path, capsys):
    a = cmd_simulate(_campaign(tmp_path / "a"))
    b = cmd_simulate(_campaign(tmp_path / "b"))
    for name in ("results.csv", "summary.json", "summary.csv"):
        assert open(f"{a}/{name}", "rb").read() == open(f"{b}/{name}", "rb").read()


def test_resume_matches_uninterrupted(tmp_path, capsys):
    full = cmd_simulate(_campaign(tmp_path / "full", replicates=3))
    part = tmp_path / "part"
    cmd_simulate(_campaign(part, replicates=2))
    resumed = cmd_simulate(_campaign(part, replicates=3))
    for name in ("results.csv", "summary.json"):
        assert open(f"{full}/{name}", "rb").read() == open(f"{resumed}/{name}", "rb").read()


def test_worker_count_does_not_change_output(tmp_path, capsys):
    a = cmd_simulate(_campaign(tmp_path / "w1", workers=1))
    b = cmd_simulate(_campaign(tmp_path / "w2", workers=2))
    assert open(f"{a}/results.csv", "rb").read() == open(f"{b}/results.csv", "rb").read()


def test_grid_summary_nests_by_value(tmp_path, capsys):
    out = cmd_simulate(_campaign(tmp_path / "g", replicates=1, grid={"n_s0": [60, 90]}))
    summary = json.loads(open(f"{out}/summary.json").read())
    assert set(summary) == {"n_s0=60", "n_s0=90"}


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown method"):
        RunConfig(methods=("MU", "TransGLM"))
    with pytest.raises(ConfigError, match="grid"):
        RunConfig(grid={"n_s0": [1], "t": [0]})
    with pytest.raises(ConfigError, match="sim field"):
        RunConfig(sim={"alpha": 1})


def test_fit_round_trip(tmp_path):
    data = tmp_path / "train.csv"
    write_panel_csv(generate(SimConfig(**SIM, seed=3)), data)
    run = RunConfig(command="fit", methods=("IW", "IM", "naive"), seed=1,
                    out=str(tmp_path / "model.json"))
    model = cmd_fit(run, data)
    loaded = load_model(run.out)
    for m in ("IW", "IM", "naive"):
        assert loaded[m]["coef"] == model[m]["coef"]
        assert len(loaded[m]["coef"]) == SIM["q"]


def test_fit_empty_minority_source_named(tmp_path):
    data = tmp_path / "train.csv"
    write_panel_csv(generate(SimConfig(**{**SIM, "n_s0": 0}, seed=3)), data)
    run = RunConfig(command="fit", methods=("naive",), out=str(tmp_path / "m.json"))
    with pytest.raises(PanelError, match="source-minority"):
        cmd_fit(run, data)


def test_fit_im_without_w(tmp_path):
    rng = np.random.default_rng(2)
    n_s, n_t = 120, 150
    X = np.column_stack([np.ones(n_s + n_t), rng.standard_normal((n_s + n_t, 2))])
    y = np.r_[(rng.random(n_s) < 0.4).astype(float), np.full(n_t, np.nan)]
    panel = LabeledPanel(np.r_[np.ones(n_s), np.zeros(n_t)], np.zeros(n_s + n_t), y, X,
                         np.empty((n_s + n_t, 0)))
    data = tmp_path / "train.csv"
    write_panel_csv(panel, data)
    model = cmd_fit(RunConfig(command="fit", methods=("IM",), out=str(tmp_path / "m.json")), data)
    assert model["IM"]["coef"] is not None and len(model["IM"]["coef"]) == 3


def test_predict_examples(tmp_path):
    model = _model(tmp_path / "m.json", {"logit": ([0.0, 0.0, 0.0], "logistic"),
                                          "lin": ([0.0, 1.0, 0.0], "identity"),
                                          "slope": ([0.0, 1.0, 0.0], "logistic")})
    feats = _write_csv(tmp_path / "x.csv", ["X1", "X2", "X3"],
                       [[1, 3, 0], [1, -1, 2], [1, 0.5, 0], [1, 2, 1]])
    out = cmd_predict(model, feats, str(tmp_path / "p.csv"))
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["logit"]) for r in rows] == [0.5] * 4
    assert float(rows[0]["lin"]) == 3.0
    x2 = np.array([3, -1, 0.5, 2])
    p = np.array([float(r["slope"]) for r in rows])
    assert np.all(np.diff(p[np.argsort(x2)]) > 0)


def test_predict_dimension_mismatch(tmp_path):
    model = _model(tmp_path / "m.json", {"a": ([0.0, 1.0], "logistic")})
    feats = _write_csv(tmp_path / "x.csv", ["X1", "X2", "X3"], [[1, 0, 0]])
    with pytest.raises(PanelError, match="expects 2"):
        cmd_predict(model, feats, str(tmp_path / "p.csv"))


def test_evaluate_null_and_perfect(tmp_path, capsys):
    rng = np.random.default_rng(6)
    x = rng.choice([-1.0, 1.0], 200)
    y = (x > 0).astype(float)
    y[:30] = 1 - y[:30]
    model = _model(tmp_path / "m.json", {"null": ([float(logit(y.mean())), 0.0], "logistic")})
    data = _write_csv(tmp_path / "v.csv", ["X1", "X2", "Y"], np.column_stack([np.ones(200), x, y]))
    out = tmp_path / "metrics.csv"
    rows = cmd_evaluate(model, data, str(out))
    assert rows[0]["BSS"] == pytest.approx(0.0, abs=1e-12)
    with open(out) as fh:
        assert set(next(csv.reader(fh))) == {"method", "BSS", "GOF", "AUC"}

    y = (x > 0).astype(float)
    perfect = _model(tmp_path / "p.json", {"perfect": ([0.0, 100.0], "logistic")})
    data = _write_csv(tmp_path / "d.csv", ["X1", "X2", "Y"], np.column_stack([np.ones(200), x, y]))
    r = cmd_evaluate(perfect, data)[0]
    assert r["BSS"] == pytest.approx(1.0, abs=1e-12) and r["AUC"] == 1.0


def test_main_exit_codes(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2
    assert "does not exist" in capsys.readouterr().err
    model = _model(tmp_path / "m.json", {"a": ([0.0, 1.0], "logistic")})
    one_class = _write_csv(tmp_path / "v.csv", ["X1", "X2", "Y"], [[1, 0, 1], [1, 1, 1]])
    assert main(["evaluate", "--model", model, "--data", one_class]) == 2
    assert main(["simulate", "--methods", "bogus", "--out", str(tmp_path / "o")]) == 2
    feats = _write_csv(tmp_path / "x.csv", ["X1", "X2"], [[1, 0.0]])
    assert main(["predict", "--model", model, "--data", feats, "--out", str(tmp_path / "p.csv")]) == 0


def test_main_simulate_flags_override(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sim": SIM, "replicates": 5, "methods": ["IM"], "n_oracle": 100_000}))
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(cfg), "--replicates", "1", "--methods", "naive",
                 "--seed", "3", "--out", str(out)]) == 0
    rows = read_results(out / "results.csv")
    assert [(r["replicate"], r["method"]) for r in rows] == [("0", "naive")]
