"""Command-line entry point: simulation campaigns, fitting, prediction, evaluation.

    makeup simulate --config campaign.json --out results/
    makeup fit --data train.csv --out model.json
    makeup predict --model model.json --data features.csv --out predictions.csv
    makeup evaluate --model model.json --data validation.csv --out metrics.csv

A campaign config is a JSON object; every key is optional::

    {"sim": {"setting": "I", "q": 100, "p": 100, "t": 1, "n_s0": 400},
     "grid": {"n_s0": [300, 600]},
     "replicates": 20, "methods": ["MU", "MU_min-o", "IW"],
     "seed": 2024, "workers": 1, "n_oracle": 1000000,
     "tuning": {"omega_scale": 1.0}, "transfer": {"temperature": 5.0}}

Command-line flags override the file.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import MAJORITY, MINORITY, SOURCE, TARGET, PanelError, read_labeled_csv, read_panel_csv
from .debias import DebiasTuning
from .metrics import MetricError, auc, brier_skill, coef_error, goodness_of_fit, summarize
from .simgen import SimConfig, compute_truth, generate, replicate_seed
from .solver import link_mean
from .transfer import TransferOptions
from .workflow import ALL_METHODS, MAKEUP_METHODS, fit_methods, parse_methods

logger = logging.getLogger("makeup")

RESULT_FIELDS = ("grid", "value", "replicate", "method", "status", "l1_err", "l2_err",
                 "n_warnings", "error")
ORACLE_STREAM = 10**9
GRID_KEYS = ("n_s0", "n_s1", "n_t0", "n_t1", "t", "q", "p", "setting")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "simulate"
    sim: dict = field(default_factory=dict)
    grid: dict | None = None
    replicates: int = 20
    methods: tuple = ALL_METHODS
    seed: int = 2024
    workers: int = 1
    n_oracle: int = 1_000_000
    tuning: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    out: str | None = None

    def __post_init__(self):
        try:
            self.methods = parse_methods(self.methods)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.grid:
            if len(self.grid) != 1:
                raise ConfigError("grid must vary exactly one SimConfig field")
            (key, vals), = self.grid.items()
            if key not in GRID_KEYS:
                raise ConfigError(f"cannot vary {key!r}; choose one of {GRID_KEYS}")
            if not isinstance(vals, list) or not vals:
                raise ConfigError("grid values must be a non-empty list")
        known = {f.name for f in fields(SimConfig)}
        bad = sorted(set(self.sim) - known)
        if bad:
            raise ConfigError(f"unknown sim field(s) {bad}")
        self.debias_tuning()
        self.transfer_options()

    def debias_tuning(self) -> DebiasTuning:
        tun = dict(self.tuning)
        if "beta_grid" in tun:
            tun["beta_grid"] = tuple(tun["beta_grid"])
        try:
            return DebiasTuning(**tun)
        except TypeError as exc:
            raise ConfigError(f"bad tuning section: {exc}") from None

    def transfer_options(self) -> TransferOptions:
        opts = dict(self.transfer)
        for key in ("multipliers", "full_multipliers"):
            if key in opts:
                opts[key] = tuple(opts[key])
        try:
            return TransferOptions(**opts)
        except TypeError as exc:
            raise ConfigError(f"bad transfer section: {exc}") from None

    def points(self) -> list:
        """(grid key, value, SimConfig) per grid point; key is '' without a grid."""
        base = SimConfig(**self.sim)
        if not self.grid:
            return [("", "", base)]
        (key, vals), = self.grid.items()
        return [(key, str(v), base.replace(**{key: v})) for v in vals]


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def build_run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    allowed = {f.name for f in fields(RunConfig)} - {"command"}
    bad = sorted(set(cfg) - allowed)
    if bad:
        raise ConfigError(f"unknown config key(s) {bad}")
    for name in ("out", "seed", "workers", "replicates", "methods"):
        val = getattr(args, name, None)
        if val is not None:
            cfg[name] = val
    if isinstance(cfg.get("methods"), str):
        cfg["methods"] = cfg["methods"].split(",")
    return RunConfig(command=args.command, **cfg)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "NA"
    return repr(float(v))


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


def run_replicate(task) -> list:
    """Generate one panel, fit the methods and score them against the truth."""
    key, value, sim, rep, root, methods, tuning, transfer, truth = task
    cfg = SimConfig(**sim).replace(seed=replicate_seed(root, rep))
    rows = []
    try:
        panel = generate(cfg)
        fits = fit_methods(panel, methods, tuning=DebiasTuning(**tuning), seed=rep,
                           options=TransferOptions(**transfer))
    except Exception as exc:  # noqa: BLE001 - the campaign keeps going
        msg = f"{type(exc).__name__}: {exc}"
        return [dict(grid=key, value=value, replicate=rep, method=m, status="failed",
                     l1_err="NA", l2_err="NA", n_warnings=0, error=msg) for m in methods]
    for m, f in fits.items():
        if f.ok and f.coef is not None:
            rows.append(dict(grid=key, value=value, replicate=rep, method=m, status="ok",
                             l1_err=_fmt(coef_error(f.coef, truth, "l1")),
                             l2_err=_fmt(coef_error(f.coef, truth, "l2")),
                             n_warnings=len(f.warnings), error=""))
        else:
            rows.append(dict(grid=key, value=value, replicate=rep, method=m, status="failed",
                             l1_err="NA", l2_err="NA", n_warnings=len(f.warnings),
                             error=f.error or "no estimate"))
    return rows


@contextlib.contextmanager
def _quiet():
    """Silence solver warnings; fit_methods records them per method anyway."""
    prev = logging.root.manager.disable
    logging.disable(logging.WARNING)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            yield
    finally:
        logging.disable(prev)


def _run_quiet(task):
    with _quiet():
        return run_replicate(task)


def _sort_rows(rows, run: RunConfig):
    order = {v: k for k, (_, v, _) in enumerate(run.points())}
    morder = {m: k for k, m in enumerate(ALL_METHODS)}
    return sorted(rows, key=lambda r: (order.get(r["value"], len(order)), int(r["replicate"]),
                                       morder.get(r["method"], len(morder))))


def write_results(path, rows):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: r[k] for k in RESULT_FIELDS})
    os.replace(tmp, path)


def read_results(path) -> list:
    if not os.path.exists(path):
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != set(RESULT_FIELDS):
        raise ConfigError(f"{path} does not look like a results file")
    return rows


def summarize_results(rows, run: RunConfig) -> dict:
    def block(value):
        out = {}
        for m in run.methods:
            errs = [None if r["l2_err"] == "NA" else float(r["l2_err"])
                    for r in rows if r["value"] == value and r["method"] == m]
            out[m] = summarize(errs)
        return out
    if not run.grid:
        return block("")
    return {f"{key}={value}": block(value) for key, value, _ in run.points()}


def summary_table(summary, run: RunConfig) -> list:
    """Methods by grid value, mean l2 error."""
    if not run.grid:
        cols, blocks = ["all"], [summary]
    else:
        cols = list(summary)
        blocks = [summary[c] for c in cols]
    header = ["method"] + cols
    body = []
    for m in run.methods:
        vals = [b[m]["mean_l2"] for b in blocks]
        body.append([m] + ["NA" if v is None else f"{v:.4f}" for v in vals])
    return [header] + body


def cmd_simulate(run: RunConfig) -> str:
    out = run.out or "results"
    os.makedirs(out, exist_ok=True)
    res_path = os.path.join(out, "results.csv")
    points = run.points()
    wanted = {(v, rep) for _, v, _ in points for rep in range(run.replicates)}
    existing = [r for r in read_results(res_path)
                if (r["value"], int(r["replicate"])) in wanted and r["method"] in run.methods]
    done = {}
    for r in existing:
        done.setdefault((r["value"], int(r["replicate"])), set()).add(r["method"])
    complete = {k for k, ms in done.items() if ms == set(run.methods)}
    rows = [r for r in existing if (r["value"], int(r["replicate"])) in complete]
    if complete:
        logger.info("resuming: %d replicate(s) already in %s", len(complete), res_path)

    tuning = asdict(run.debias_tuning())
    transfer = asdict(run.transfer_options())
    tasks = []
    for key, value, cfg in points:
        todo = [rep for rep in range(run.replicates) if (value, rep) not in complete]
        if not todo:
            continue
        # the oracle stream is disjoint from every replicate's data stream
        truth = compute_truth(cfg, n_oracle=run.n_oracle, seed=replicate_seed(run.seed, ORACLE_STREAM),
                              subgroups=(MINORITY,)).beta_bar_0
        for rep in todo:
            tasks.append((key, value, cfg.to_dict(), rep, run.seed, run.methods, tuning,
                          transfer, truth))

    def merged(new):
        rows.extend(new)
        write_results(res_path, _sort_rows(rows, run))
        logger.info("finished %s%s replicate %s", new[0]["grid"] and new[0]["grid"] + "=",
                    new[0]["value"], new[0]["replicate"])

    if run.workers == 1:
        _limit_threads()
        for t in tasks:
            merged(_run_quiet(t))
    elif tasks:
        with ProcessPoolExecutor(max_workers=run.workers, initializer=_limit_threads) as pool:
            for new in pool.map(_run_quiet, tasks):
                merged(new)
    rows = _sort_rows(rows, run)
    write_results(res_path, rows)

    summary = summarize_results(rows, run)
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    table = summary_table(summary, run)
    with open(os.path.join(out, "summary.csv"), "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(table)
    print(format_table(table))
    return out


def format_table(table) -> str:
    widths = [max(len(str(r[k])) for r in table) for k in range(len(table[0]))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# fit / predict / evaluate
# ---------------------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        return float(v) if math.isfinite(v) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def cmd_fit(run: RunConfig, data_path) -> dict:
    panel = read_panel_csv(data_path)
    need = [(SOURCE, MINORITY), (TARGET, MINORITY)]
    if any(m in MAKEUP_METHODS for m in run.methods):
        need += [(SOURCE, MAJORITY), (TARGET, MAJORITY)]
    elif run.methods == ("naive",):
        need = [(SOURCE, MINORITY)]
    for s, r in need:
        panel.require(s, r)
    tuning = run.debias_tuning()
    fits = fit_methods(panel, run.methods, tuning=tuning, seed=run.seed,
                       options=run.transfer_options())
    model = {}
    for m, f in fits.items():
        entry = {"coef": None if f.coef is None else [float(v) for v in f.coef],
                 "support": f.support,
                 "tuning": _jsonable({"g_link": tuning.g_link, **f.tuning}),
                 "warnings": list(f.warnings)}
        if f.error:
            entry["error"] = f.error
        model[m] = entry
    out = run.out or "model.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(model, fh, indent=2)
        fh.write("\n")
    return model


def load_model(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        model = json.load(fh)
    if not isinstance(model, dict) or not model:
        raise ConfigError(f"{path}: not a model file")
    usable = {m: e for m, e in model.items() if e.get("coef") is not None}
    if not usable:
        raise ConfigError(f"{path}: no method has coefficients")
    return usable


def _model_dim(model) -> int:
    dims = {len(e["coef"]) for e in model.values()}
    if len(dims) != 1:
        raise ConfigError("methods in the model disagree on the coefficient length")
    return dims.pop()


def predict_rows(model, X) -> dict:
    return {m: link_mean(e.get("tuning", {}).get("g_link", "logistic"),
                         X @ np.asarray(e["coef"], dtype=float))
            for m, e in model.items()}


def cmd_predict(model_path, data_path, out) -> str:
    model = load_model(model_path)
    X, _ = read_labeled_csv(data_path, _model_dim(model))
    preds = predict_rows(model, X)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["row"] + list(preds))
        for i in range(X.shape[0]):
            wr.writerow([i + 1] + [repr(float(preds[m][i])) for m in preds])
    return out


def evaluate_model(model, X, y) -> list:
    rows = []
    for m, e in model.items():
        beta = np.asarray(e["coef"], dtype=float)
        link = e.get("tuning", {}).get("g_link", "logistic")
        rows.append({"method": m, "BSS": brier_skill(beta, X, y, link),
                     "GOF": goodness_of_fit(beta, X, y, link), "AUC": auc(beta, X, y)})
    return rows


def cmd_evaluate(model_path, data_path, out=None) -> list:
    model = load_model(model_path)
    X, y = read_labeled_csv(data_path, _model_dim(model))
    if y is None or np.any(np.isnan(y)):
        raise PanelError(f"{data_path}: every validation row needs a Y value")
    rows = evaluate_model(model, X, y)
    if out:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            wr = csv.DictWriter(fh, fieldnames=["method", "BSS", "GOF", "AUC"],
                                lineterminator="\n")
            wr.writeheader()
            for r in rows:
                wr.writerow({k: (v if k == "method" else repr(float(v))) for k, v in r.items()})
    table = [["method", "BSS", "GOF", "AUC"]] + [
        [r["method"]] + [f"{r[k]:.4f}" for k in ("BSS", "GOF", "AUC")] for r in rows]
    print(format_table(table))
    return rows


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p, out_help):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help=out_help)
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--methods", help="comma-separated method names: " + ",".join(ALL_METHODS))
    p.add_argument("-v", "--verbose", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="makeup", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a simulation campaign")
    _common(p, "results directory")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.add_argument("--replicates", type=int, help="replicates per grid point")

    p = sub.add_parser("fit", help="fit methods on a panel CSV and write a model JSON")
    _common(p, "model JSON path")
    p.add_argument("--data", required=True, help="training panel CSV (S,R,Y,X1..,W1..)")

    p = sub.add_parser("predict", help="predicted means for each method")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="CSV with X1..Xq columns")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("evaluate", help="BSS, GOF and AUC on labeled validation rows")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="CSV with X1..Xq and Y columns")
    p.add_argument("--out", help="metrics CSV path")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "simulate":
            cmd_simulate(build_run_config(args))
        elif args.command == "fit":
            cmd_fit(build_run_config(args), args.data)
        elif args.command == "predict":
            cmd_predict(args.model, args.data, args.out)
        else:
            cmd_evaluate(args.model, args.data, args.out)
    except (ConfigError, PanelError, MetricError, FileNotFoundError) as exc:
        print(f"makeup: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
