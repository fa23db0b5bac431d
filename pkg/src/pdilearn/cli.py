"""Command-line entry point: ``pdilearn {simulate,fit,predict,evaluate,oracle}``."""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .core import HyperParams
from .errors import NoInterval, PDIError, SchemaError
from .experiment import METRIC_COLUMNS, TABLE_COLUMNS, ExperimentConfig, run_experiment
from .io import (
    fmt_float,
    load_model,
    model_dim,
    read_covariates,
    read_dataset,
    save_model,
    write_table,
)
from .metrics import classification_metrics, contingency, format_metric
from .pipeline import DEFAULT_GRID_STEP, ESTIMATORS, cross_fit, fit_estimator, study_grid
from .simulation import oracle_bounds

log = logging.getLogger("pdilearn")

GRID_KEYS = ("gamma", "lam", "p_init", "kappa")
CONTROL_KEYS = {"epsilon": float, "max_dc_iter": int, "dc_tol": float, "max_sub_iter": int, "sub_tol": float,
                "sub_window": int, "nodes": int}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Settings gathered from the config file, overridden by command-line flags."""

    seed: int = 0
    out: Optional[str] = None
    alphas: tuple = (0.7,)
    estimators: tuple = ESTIMATORS
    replicates: int = 20
    n_train: int = 500
    n_test: int = 500
    folds: int = 10
    cross_fit: int = 0
    workers: int = 1
    sd_a: float = 0.1
    sd_y: float = 0.25
    grid_step: float = DEFAULT_GRID_STEP
    grid_values: dict = field(default_factory=dict)
    controls: dict = field(default_factory=dict)
    data: Optional[str] = None
    model: Optional[str] = None
    predictions: Optional[str] = None

    def grid(self) -> list:
        base = study_grid(**self.controls)
        if not self.grid_values:
            return base
        axes = {k: sorted({getattr(h, k) for h in base}) for k in GRID_KEYS}
        axes.update(self.grid_values)
        out = []
        for g in axes["gamma"]:
            for lam in axes["lam"]:
                for p in axes["p_init"]:
                    for kappa in axes["kappa"]:
                        out.append(HyperParams(gamma=g, lam=lam, p_init=p, kappa=kappa, **self.controls))
        if not out:
            raise UsageError("hyperparameter grid is empty")
        return out


def _floats(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None
    if not vals:
        raise UsageError("empty list")
    return vals


def read_config(path: str) -> RunConfig:
    """Parse an INI-style file with ``[run]``, ``[dgp]``, ``[grid]`` and ``[files]`` sections."""
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.read(path, encoding="utf-8")
    known = {"run", "dgp", "grid", "files"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise UsageError(f"{path}: unknown sections {sorted(unknown)}")
    cfg = RunConfig()
    if cp.has_section("run"):
        s = cp["run"]
        ints = ("seed", "replicates", "n_train", "n_test", "folds", "cross_fit", "workers")
        for key in s:
            if key in ints:
                setattr(cfg, key, s.getint(key))
            elif key == "alphas":
                cfg.alphas = _floats(s[key])
            elif key == "estimators":
                cfg.estimators = tuple(e.strip() for e in s[key].split(",") if e.strip())
            elif key == "grid_step":
                cfg.grid_step = s.getfloat(key)
            elif key == "out":
                cfg.out = s[key]
            else:
                raise UsageError(f"{path}: unknown key run.{key}")
    if cp.has_section("dgp"):
        for key in cp["dgp"]:
            if key not in ("sd_a", "sd_y"):
                raise UsageError(f"{path}: unknown key dgp.{key}")
            setattr(cfg, key, cp["dgp"].getfloat(key))
    if cp.has_section("grid"):
        for key, val in cp["grid"].items():
            if key in GRID_KEYS:
                cfg.grid_values[key] = _floats(val)
            elif key in CONTROL_KEYS:
                cfg.controls[key] = CONTROL_KEYS[key](val)
            else:
                raise UsageError(f"{path}: unknown key grid.{key}")
    if cp.has_section("files"):
        for key, val in cp["files"].items():
            if key not in ("data", "model", "predictions"):
                raise UsageError(f"{path}: unknown key files.{key}")
            setattr(cfg, key, val)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style settings file")
    common.add_argument("--seed", type=int, help="master seed; every stream derives from it")
    common.add_argument("--out", help="output directory (simulate) or output file")
    common.add_argument("--alpha", help="comma-separated probability levels")
    common.add_argument("--folds", type=int, help="cross-validation folds")
    common.add_argument("--replicates", type=int)
    common.add_argument("--sd-a", dest="sd_a", type=float, help="dose noise scale")
    common.add_argument("--sd-y", dest="sd_y", type=float, help="outcome noise scale")
    common.add_argument("--grid-step", dest="grid_step", type=float, help="dose grid step of the plug-in method")
    common.add_argument("--estimators", help="comma-separated subset of " + ",".join(ESTIMATORS))
    common.add_argument("--workers", type=int, help="replicates run in this many processes")
    common.add_argument("--n-train", dest="n_train", type=int)
    common.add_argument("--n-test", dest="n_test", type=int)
    common.add_argument("--cross-fit", dest="cross_fit", type=int, help="fit: number of cross-fitting folds")
    common.add_argument("--data", help="input CSV")
    common.add_argument("--model", help="model file")
    common.add_argument("--predictions", help="predictions CSV (evaluate)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pdilearn", description="Learn personalised probability dose intervals.")
    p.add_argument("--version", action="version", version=f"pdilearn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run the replicated synthetic study")
    sub.add_parser("fit", parents=[common], help="fit one estimator on a labelled CSV")
    sub.add_parser("predict", parents=[common], help="predict intervals for covariate rows")
    sub.add_parser("evaluate", parents=[common], help="score predictions against a labelled CSV")
    sub.add_parser("oracle", parents=[common], help="oracle intervals of the synthetic design")
    return p


def resolve(args) -> RunConfig:
    cfg = read_config(args.config) if args.config else RunConfig()
    for key in ("seed", "out", "folds", "replicates", "sd_a", "sd_y", "grid_step", "workers", "n_train",
                "n_test", "cross_fit", "data", "model", "predictions"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    if args.alpha is not None:
        cfg.alphas = _floats(args.alpha)
    if args.estimators is not None:
        cfg.estimators = tuple(e.strip() for e in args.estimators.split(",") if e.strip())
    return cfg


def _need(value, flag):
    if value is None:
        raise UsageError(f"missing required setting {flag}")
    return value


def _need_file(path, flag):
    _need(path, flag)
    if not os.path.isfile(path):
        raise UsageError(f"input file not found: {path}")
    return path


def _out_file(path):
    _need(path, "--out")
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise UsageError(f"output directory does not exist: {parent}")
    return path


def _cell(v, digits=6):
    return "" if v is None else f"{v:.{digits}f}"


def format_table(rows) -> str:
    """Fixed-width text rendering; undefined entries print as a dash."""
    header = list(TABLE_COLUMNS)
    body = [[f"{r['alpha']:.2f}", r["Estimator"]] + [format_metric(r[c]) for c in METRIC_COLUMNS] for r in rows]
    widths = [max(len(h), *(len(b[j]) for b in body)) if body else len(h) for j, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body)
    return "\n".join(lines) + "\n"


def _figures(records, cfg: RunConfig, outdir: str) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    meta = {"Software": None}
    written = []
    fig, axes = plt.subplots(1, len(cfg.alphas), figsize=(4.5 * len(cfg.alphas), 3.6), squeeze=False)
    for ax, alpha in zip(axes[0], cfg.alphas):
        data, labels = [], []
        for kind in cfg.estimators:
            vals = [r.values["MAE"] for r in records if r.alpha == alpha and r.estimator == kind
                    and r.values["MAE"] is not None]
            if vals:
                data.append(vals)
                labels.append(kind)
        if data:
            ax.boxplot(data)
            ax.set_xticks(range(1, len(labels) + 1), labels)
        ax.set_title(f"alpha = {alpha:g}")
        ax.set_ylabel("MAE")
    fig.tight_layout()
    path = os.path.join(outdir, "mae_boxplot.png")
    fig.savefig(path, dpi=100, metadata=meta)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    width = 0.8 / len(cfg.estimators)
    for k, kind in enumerate(cfg.estimators):
        heights = []
        for alpha in cfg.alphas:
            vals = [r.values["Invalid PDI"] for r in records if r.alpha == alpha and r.estimator == kind]
            heights.append(float(np.mean(vals)))
        ax.bar(np.arange(len(cfg.alphas)) + k * width, heights, width, label=kind)
    ax.set_xticks(np.arange(len(cfg.alphas)) + 0.4 - width / 2, [f"{a:g}" for a in cfg.alphas])
    ax.set_xlabel("alpha")
    ax.set_ylabel("invalid proportion")
    ax.legend()
    fig.tight_layout()
    path = os.path.join(outdir, "invalid_proportion.png")
    fig.savefig(path, dpi=100, metadata=meta)
    plt.close(fig)
    written.append(path)
    return written


def cmd_simulate(cfg: RunConfig) -> int:
    outdir = _need(cfg.out, "--out")
    if not os.path.isdir(outdir):
        raise UsageError(f"output directory does not exist: {outdir}")
    exp = ExperimentConfig(alphas=tuple(cfg.alphas), estimators=tuple(cfg.estimators), replicates=cfg.replicates,
                           n_train=cfg.n_train, n_test=cfg.n_test, seed=cfg.seed, sd_a=cfg.sd_a, sd_y=cfg.sd_y,
                           folds=cfg.folds, grid=tuple(cfg.grid()), grid_step=cfg.grid_step, workers=cfg.workers)
    rows, records = run_experiment(exp)
    write_table(os.path.join(outdir, "results.csv"), TABLE_COLUMNS,
                [[f"{r['alpha']:g}", r["Estimator"]] + [_cell(r[c]) for c in METRIC_COLUMNS] for r in rows])
    write_table(os.path.join(outdir, "replicates.csv"), ("replicate",) + TABLE_COLUMNS + ("gamma", "lam", "p_init", "kappa"),
                [[rec.replicate, f"{rec.alpha:g}", rec.estimator] + [_cell(rec.values[c]) for c in METRIC_COLUMNS]
                 + (["", "", "", ""] if rec.hyper is None else
                    [f"{rec.hyper.gamma:g}", f"{rec.hyper.lam:g}", f"{rec.hyper.p_init:g}", f"{rec.hyper.kappa:g}"])
                 for rec in records])
    table = format_table(rows)
    with open(os.path.join(outdir, "results.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"replicates={cfg.replicates} n_train={cfg.n_train} n_test={cfg.n_test} seed={cfg.seed} "
                 f"sd_a={cfg.sd_a:g} sd_y={cfg.sd_y:g} folds={cfg.folds}\n\n")
        fh.write(table)
    if records:
        _figures(records, cfg, outdir)
    sys.stdout.write(table)
    return 0


def cmd_fit(cfg: RunConfig) -> int:
    ds = read_dataset(_need_file(cfg.data, "--data"))
    out = _out_file(cfg.out)
    if len(cfg.alphas) != 1:
        raise UsageError("fit takes exactly one --alpha")
    if len(cfg.estimators) != 1:
        raise UsageError("fit takes exactly one estimator (--estimators)")
    kind, alpha = cfg.estimators[0], cfg.alphas[0]
    if cfg.cross_fit:
        if kind == "Ind-Para":
            raise UsageError("cross-fitting applies to the direct estimators only")
        est = cross_fit(ds, cfg.cross_fit, cfg.grid(), alpha, cfg.seed, cfg.folds, kind == "D-CW", cfg.grid_step)
    else:
        est = fit_estimator(kind, ds, cfg.grid(), alpha, cfg.folds, cfg.seed, None, cfg.grid_step)
    save_model(est, out)
    print(f"wrote {out}")
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    est = load_model(_need_file(cfg.model, "--model"))
    X = read_covariates(_need_file(cfg.data, "--data"), model_dim(est))
    out = _out_file(cfg.out)
    ell, u, fb, invalid = est.predict(X)
    write_table(out, ("ell", "u", "fallback", "invalid"),
                [[fmt_float(a), fmt_float(b), int(f), int(i)] for a, b, f, i in zip(ell, u, fb, invalid)])
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    ds = read_dataset(_need_file(cfg.data, "--data"))
    pred_path = _need_file(cfg.predictions, "--predictions")
    out = _out_file(cfg.out)
    with open(pred_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"ell", "u"} <= set(reader.fieldnames):
            raise SchemaError(f"{pred_path}: predictions need ell and u columns")
        rows = list(reader)
    if len(rows) != ds.n:
        raise SchemaError(f"{pred_path}: {len(rows)} predictions for {ds.n} labelled rows")
    ell = np.array([float(r["ell"]) for r in rows])
    u = np.array([float(r["u"]) for r in rows])
    invalid = np.array([int(r.get("invalid") or 0) for r in rows])
    c = contingency(ell, u, ds.a, ds.indicator)
    m = classification_metrics(c).as_dict()
    header = ("tp", "tn", "fp", "fn", "Invalid PDI") + tuple(m)
    write_table(out, header, [[c.tp, c.tn, c.fp, c.fn, _cell(float(np.mean(invalid)))] + [_cell(v) for v in m.values()]])
    return 0


def cmd_oracle(cfg: RunConfig) -> int:
    X = read_covariates(_need_file(cfg.data, "--data"))
    out = _out_file(cfg.out)
    rows = []
    for alpha in cfg.alphas:
        try:
            ell, u = oracle_bounds(X, alpha, cfg.sd_y)
        except NoInterval:
            rows.extend([f"{alpha:g}", i, "", ""] for i in range(X.shape[0]))
            continue
        rows.extend([f"{alpha:g}", i, fmt_float(a), fmt_float(b)] for i, (a, b) in enumerate(zip(ell, u)))
    write_table(out, ("alpha", "row", "ell", "u"), rows)
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "evaluate": cmd_evaluate,
            "oracle": cmd_oracle}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, PDIError, ValueError, OSError) as exc:
        print(f"pdilearn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
