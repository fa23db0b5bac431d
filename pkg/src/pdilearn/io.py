"""CSV ingestion and model persistence.

Data files carry a header ``y,a,t_lo,t_hi,x1..xd``.  Model files are JSON
text in which every float is written with 17 significant digits, so a
save/load cycle reproduces coefficients bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from typing import Optional

import numpy as np

from .core import Dataset, HyperParams, IntervalRule, validate_dataset
from .errors import SchemaError, VersionError
from .nuisance import DoseProbModel, NuisanceModels, PropensityModel
from .pipeline import AggregateRule, FittedEstimator, IndirectRule

MODEL_FORMAT = "pdilearn-model"
MODEL_VERSION = 1
BASE_COLUMNS = ("y", "a", "t_lo", "t_hi")


# ---------------------------------------------------------------------------
# CSV


def fmt_float(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(float(v), ".17g")


def covariate_names(d: int) -> list:
    return [f"x{j}" for j in range(1, d + 1)]


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file, expected a header row")
    return [h.strip() for h in rows[0]], rows[1:]


def _covariate_columns(header, path, expect: Optional[int]):
    xs = [h for h in header if h not in BASE_COLUMNS]
    d = len(xs)
    if xs != covariate_names(d) or d == 0:
        raise SchemaError(f"{path}: covariate columns must be x1..xd, got {xs}")
    if expect is not None and d != expect:
        raise SchemaError(f"{path}: model expects {expect} covariates, file has {d}")
    return [header.index(c) for c in xs]


def _floats(rows, cols, path):
    out = np.empty((len(rows), len(cols)))
    for i, row in enumerate(rows):
        try:
            out[i] = [float(row[c]) for c in cols]
        except (ValueError, IndexError) as exc:
            raise SchemaError(f"{path}: row {i + 2}: {exc}") from None
    return out


def read_dataset(path) -> Dataset:
    """Labelled data; ``r`` is derived from ``y`` and the per-row range."""
    header, rows = _read_rows(path)
    if tuple(header[:4]) != BASE_COLUMNS:
        raise SchemaError(f"{path}: header must start with {','.join(BASE_COLUMNS)}, got {header[:4]}")
    xcols = _covariate_columns(header, path, None)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    base = _floats(rows, [0, 1, 2, 3], path)
    x = _floats(rows, xcols, path)
    return validate_dataset(Dataset(base[:, 0], base[:, 1], x, base[:, 2], base[:, 3]))


def read_covariates(path, d: Optional[int] = None) -> np.ndarray:
    """Covariate matrix from a file with ``x1..xd`` columns (other schema columns optional)."""
    header, rows = _read_rows(path)
    extra = [h for h in header if h in BASE_COLUMNS]
    if extra and tuple(header[:len(extra)]) != tuple(c for c in BASE_COLUMNS if c in extra):
        raise SchemaError(f"{path}: base columns out of order: {header}")
    cols = _covariate_columns(header, path, d)
    return _floats(rows, cols, path)


def write_dataset(path, ds: Dataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(BASE_COLUMNS) + covariate_names(ds.d))
        for i in range(ds.n):
            w.writerow([fmt_float(v) for v in (ds.y[i], ds.a[i], ds.t_lo[i], ds.t_hi[i], *ds.x[i])])


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# model files


def _emit(obj, out, depth=0):
    """JSON text with 17-digit floats; arrays stay on one line."""
    pad = "  " * depth
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = list(obj.items())
        for k, (key, val) in enumerate(items):
            out.append(f"{pad}  {json.dumps(str(key))}: ")
            _emit(val, out, depth + 1)
            out.append(",\n" if k < len(items) - 1 else "\n")
        out.append(pad + "}")
    elif isinstance(obj, np.ndarray):
        _emit(obj.tolist(), out, depth)
    elif isinstance(obj, (list, tuple)):
        if any(isinstance(v, dict) for v in obj):
            out.append("[\n")
            for k, v in enumerate(obj):
                out.append(pad + "  ")
                _emit(v, out, depth + 1)
                out.append(",\n" if k < len(obj) - 1 else "\n")
            out.append(pad + "]")
        else:
            out.append("[")
            for k, v in enumerate(obj):
                _emit(v, out, depth)
                if k < len(obj) - 1:
                    out.append(", ")
            out.append("]")
    elif obj is None or isinstance(obj, (bool, np.bool_)):
        out.append(json.dumps(None if obj is None else bool(obj)))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise SchemaError(f"cannot store non-finite value {obj}")
        out.append(format(float(obj), ".17g"))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    else:
        raise SchemaError(f"cannot store value of type {type(obj).__name__}")


def dumps(obj) -> str:
    out = []
    _emit(obj, out)
    return "".join(out) + "\n"


def _rule_dict(rule) -> dict:
    if isinstance(rule, IntervalRule):
        return {"type": "kernel", "gamma": rule.gamma, "width": rule.width, "anchor_count": rule.anchors.shape[0],
                "beta_L0": rule.beta_L0, "beta_L": rule.beta_L, "beta_U0": rule.beta_U0, "beta_U": rule.beta_U,
                "anchors": rule.anchors}
    if isinstance(rule, AggregateRule):
        return {"type": "aggregate", "rules": [_rule_dict(r) for r in rule.rules]}
    if isinstance(rule, IndirectRule):
        return {"type": "indirect", "alpha": rule.alpha, "grid_step": rule.grid_step,
                "dose_prob": _dose_prob_dict(rule.mu)}
    raise SchemaError(f"cannot store rule of type {type(rule).__name__}")


def _dose_prob_dict(m) -> dict:
    if not isinstance(m, DoseProbModel):
        raise SchemaError(f"cannot store dose-probability model of type {type(m).__name__}")
    return {"theta0": m.theta0, "theta_a": m.theta_a, "theta_a2": m.theta_a2, "theta_x": m.theta_x,
            "ridge_fallback": m.ridge_fallback}


def _nuisance_dict(n: Optional[NuisanceModels]):
    if n is None:
        return None
    if not isinstance(n.propensity, PropensityModel):
        raise SchemaError(f"cannot store propensity model of type {type(n.propensity).__name__}")
    p = n.propensity
    return {"propensity": {"coef": p.coef, "sigma2": p.sigma2, "log_dose": p.log_dose},
            "dose_prob": _dose_prob_dict(n.dose_prob), "density_floor": n.density_floor}


def estimator_alpha(est: FittedEstimator) -> float:
    if isinstance(est.rule, IndirectRule):
        return est.rule.alpha
    return est.hyper.alpha


def model_to_dict(est: FittedEstimator) -> dict:
    hyper = None if est.hyper is None else {k: getattr(est.hyper, k) for k in est.hyper.__dataclass_fields__}
    return {"format": MODEL_FORMAT, "version": MODEL_VERSION, "kind": est.kind, "alpha": estimator_alpha(est),
            "covariate_dim": est.rule.d, "hyper": hyper, "nuisance": _nuisance_dict(est.nuisance),
            "rule": _rule_dict(est.rule)}


def save_model(est: FittedEstimator, path) -> None:
    text = dumps(model_to_dict(est))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _need(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise SchemaError(f"model file: missing {where}.{key}")
    return d[key]


def _load_dose_prob(d) -> DoseProbModel:
    return DoseProbModel(float(_need(d, "theta0", "dose_prob")), float(_need(d, "theta_a", "dose_prob")),
                         float(_need(d, "theta_a2", "dose_prob")), np.array(_need(d, "theta_x", "dose_prob"), dtype=float),
                         bool(d.get("ridge_fallback", False)))


def _load_rule(d, dim: int):
    kind = _need(d, "type", "rule")
    if kind == "kernel":
        anchors = np.array(_need(d, "anchors", "rule"), dtype=float)
        count = int(_need(d, "anchor_count", "rule"))
        if anchors.ndim != 2 or anchors.shape[0] != count:
            raise SchemaError(f"model file: anchor count {count} does not match the stored anchors")
        if anchors.shape[1] != dim:
            raise SchemaError(f"model file: anchors have {anchors.shape[1]} columns, header says {dim}")
        width = d.get("width")
        return IntervalRule(float(d["beta_L0"]), np.array(d["beta_L"], dtype=float), float(d["beta_U0"]),
                            np.array(d["beta_U"], dtype=float), anchors, float(d["gamma"]),
                            None if width is None else float(width))
    if kind == "aggregate":
        rules = _need(d, "rules", "rule")
        if not rules:
            raise SchemaError("model file: aggregate rule without members")
        return AggregateRule(tuple(_load_rule(r, dim) for r in rules))
    if kind == "indirect":
        mu = _load_dose_prob(_need(d, "dose_prob", "rule"))
        if mu.d != dim:
            raise SchemaError(f"model file: dose-probability model has {mu.d} covariates, header says {dim}")
        return IndirectRule(mu, float(d["alpha"]), float(d["grid_step"]))
    raise SchemaError(f"model file: unknown rule type {kind!r}")


def _typed(key, value):
    # integral floats are written without a decimal point; restore the field type
    if value is None or key not in HyperParams.__dataclass_fields__:
        return value
    default = HyperParams.__dataclass_fields__[key].default
    return int(value) if isinstance(default, int) else float(value)


def model_from_dict(d: dict) -> FittedEstimator:
    if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
        raise VersionError("not a pdilearn model file")
    if d.get("version") != MODEL_VERSION:
        raise VersionError(f"model format version {d.get('version')!r} is not supported (expected {MODEL_VERSION})")
    dim = int(_need(d, "covariate_dim", "model"))
    rule = _load_rule(_need(d, "rule", "model"), dim)
    hyper = d.get("hyper")
    if hyper is not None:
        hyper = HyperParams(**{k: _typed(k, v) for k, v in hyper.items()})
    nd = d.get("nuisance")
    nuisance = None
    if nd is not None:
        p = _need(nd, "propensity", "nuisance")
        prop = PropensityModel(np.array(p["coef"], dtype=float), float(p["sigma2"]), bool(p["log_dose"]))
        nuisance = NuisanceModels(prop, _load_dose_prob(_need(nd, "dose_prob", "nuisance")),
                                  float(nd.get("density_floor", 1e-3)))
    return FittedEstimator(str(_need(d, "kind", "model")), rule, nuisance, hyper)


def load_model(path) -> FittedEstimator:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise VersionError(f"{path}: not a readable model file ({exc})") from None
    return model_from_dict(d)


def model_dim(est: FittedEstimator) -> int:
    return est.rule.d
