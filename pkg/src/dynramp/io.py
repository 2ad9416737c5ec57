"""File formats: YAML documents with a ``format`` header, and CSV tables.

Numeric values are written with ``repr`` precision so write-then-read gives
back the same doubles.
"""
from __future__ import annotations

import csv
import io as _io
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from . import expr as E
from .limitfit import AffineLimitSet, DemandSurrogate
from .linearize import ModelError, ProcessModel, RampingDerivation, split_affine

MODEL_FORMAT = "dynramp-model/1"
DERIVATION_FORMAT = "dynramp-derivation/1"
LIMITS_FORMAT = "dynramp-limits/1"
DEMAND_FORMAT = "dynramp-demand/1"


class InputError(Exception):
    """Malformed or inconsistent input file."""


# ---------------------------------------------------------------------------
# YAML helpers

class _Dumper(yaml.SafeDumper):
    pass


def _float_repr(dumper, value):
    if math.isnan(value):
        text = ".nan"
    elif math.isinf(value):
        text = ".inf" if value > 0 else "-.inf"
    else:
        text = repr(float(value))
        if "." not in text and "e" not in text and "n" not in text:
            text += ".0"
    return dumper.represent_scalar("tag:yaml.org,2002:float", text)


_Dumper.add_representer(float, _float_repr)
_Dumper.add_representer(np.float64, _float_repr)
_Dumper.add_representer(np.int64, lambda d, v: d.represent_int(int(v)))


def dump_yaml(data, path=None) -> str:
    text = yaml.dump(data, Dumper=_Dumper, sort_keys=False, default_flow_style=None, width=10_000)
    if path is not None:
        Path(path).write_text(text)
    return text


def load_yaml(path_or_text, expect_format: str | None = None) -> dict:
    if isinstance(path_or_text, (str, Path)) and Path(str(path_or_text)).exists():
        text = Path(path_or_text).read_text()
    elif isinstance(path_or_text, Path):
        raise InputError(f"file not found: {path_or_text}")
    else:
        text = str(path_or_text)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InputError(f"cannot parse YAML: {exc}") from None
    if not isinstance(data, dict):
        raise InputError("expected a mapping at the top level")
    if expect_format is not None:
        fmt = data.get("format")
        if fmt != expect_format:
            raise InputError(f"expected format {expect_format!r}, found {fmt!r}")
    return data


def _num(v, what: str) -> float:
    if isinstance(v, Mapping):
        if "value" not in v:
            raise InputError(f"{what}: mapping without 'value'")
        v = v["value"]
    try:
        return float(v)
    except (TypeError, ValueError):
        raise InputError(f"{what}: expected a number, got {v!r}") from None


def _req(d: Mapping, key: str, where: str):
    if key not in d:
        raise InputError(f"{where}: missing key {key!r}")
    return d[key]


# ---------------------------------------------------------------------------
# process models

def model_from_dict(data: Mapping) -> ProcessModel:
    where = "model"
    states = [str(s) for s in _req(data, "states", where)]
    u_name = str(data.get("input", "u"))
    rho = str(data.get("production_rate", "rho"))
    params = {str(k): _num(v, f"parameter {k}") for k, v in (data.get("parameters") or {}).items()}
    clash = set(params) & (set(states) | {u_name, rho})
    if clash:
        raise InputError(f"parameters shadow model symbols: {sorted(clash)}")

    def px(text, label):
        try:
            return E.parse(str(text), params)
        except E.ExprSyntaxError as exc:
            raise InputError(f"{label}: {exc}") from exc

    if "rhs" in data:
        rhs_map = data["rhs"]
        missing = [s for s in states if s not in rhs_map]
        if missing:
            raise InputError(f"rhs missing for states {missing}")
        rhs = [px(rhs_map[s], f"rhs[{s}]") for s in states]
        try:
            f1, f21, f22 = split_affine(rhs, u_name, rho)
        except ModelError as exc:
            raise InputError(str(exc)) from exc
    else:
        f1 = [px(t, "f1") for t in _req(data, "f1", where)]
        f21 = [px(t, "f2_1") for t in _req(data, "f2_1", where)]
        f22 = [px(t, "f2_2") for t in _req(data, "f2_2", where)]
    out = _req(data, "output", where)
    h = px(_req(out, "expr", "output"), "output")
    ib = _req(data, "input_bounds", where)
    pb = _req(data, "production_rate_bounds", where)
    ramp = data.get("ramp_box_per_h") or []
    wh = data.get("waste_heat")
    try:
        return ProcessModel(
            name=str(data.get("name", "model")),
            states=states,
            f1=f1, f2_1=f21, f2_2=f22, h=h,
            u_name=u_name,
            u_min=_num(_req(ib, "u_min_per_h", "input_bounds"), "u_min"),
            u_max=_num(_req(ib, "u_max_per_h", "input_bounds"), "u_max"),
            rho_min=_num(_req(pb, "min_per_h", "production_rate_bounds"), "rho_min"),
            rho_nom=_num(_req(pb, "nom_per_h", "production_rate_bounds"), "rho_nom"),
            rho_max=_num(_req(pb, "max_per_h", "production_rate_bounds"), "rho_max"),
            y_nom=_num(_req(out, "nominal", "output"), "output nominal"),
            x_nom={s: _num(v, s) for s, v in (data.get("nominal_state") or {}).items()},
            ranges={s: (float(v[0]), float(v[1])) for s, v in (data.get("state_ranges") or {}).items()},
            rho_name=rho,
            ramp_box=[(float(a), float(b)) for a, b in ramp],
            waste_heat=px(wh, "waste_heat") if wh is not None else None,
            parameters=params,
            source=dict(data),
        )
    except ModelError as exc:
        raise InputError(str(exc)) from exc


def load_model(path) -> ProcessModel:
    return model_from_dict(load_yaml(path, MODEL_FORMAT))


def model_to_dict(m: ProcessModel) -> dict:
    if m.source is not None:
        return dict(m.source)
    return {
        "format": MODEL_FORMAT,
        "name": m.name,
        "states": list(m.states),
        "input": m.u_name,
        "production_rate": m.rho_name,
        "parameters": {},
        "f1": [E.to_string(e) for e in m.f1],
        "f2_1": [E.to_string(e) for e in m.f2_1],
        "f2_2": [E.to_string(e) for e in m.f2_2],
        "output": {"expr": E.to_string(m.h), "nominal": m.y_nom},
        "input_bounds": {"u_min_per_h": m.u_min, "u_max_per_h": m.u_max},
        "production_rate_bounds": {"min_per_h": m.rho_min, "nom_per_h": m.rho_nom, "max_per_h": m.rho_max},
        "nominal_state": dict(m.x_nom),
        "state_ranges": {k: list(v) for k, v in m.ranges.items()},
        "ramp_box_per_h": [list(b) for b in m.ramp_box],
        **({"waste_heat": E.to_string(m.waste_heat)} if m.waste_heat is not None else {}),
    }


def shipped(name: str) -> Path:
    """Path of a data file bundled with the package."""
    return Path(__file__).parent / "data" / name


# ---------------------------------------------------------------------------
# derivations

def derivation_to_dict(d: RampingDerivation) -> dict:
    return {
        "format": DERIVATION_FORMAT,
        "model": model_to_dict(d.model),
        "r": d.r,
        "delta": d.delta,
        "phi": list(d.phi_names),
        "nu": d.nu_name,
        "alpha": [E.to_string(a) for a in d.alphas],
        "beta_u": E.to_string(d.beta_u),
        "beta_rho": E.to_string(d.beta_rho),
        "jacobian": [[E.to_string(e) for e in row] for row in d.jac],
        "det_j": E.to_string(d.det_j),
        "sign_u": d.sign_u,
        "sign_rho": d.sign_rho,
        "nominal": d.nominal,
        "probe": d.probe,
    }


def derivation_from_dict(data: Mapping) -> RampingDerivation:
    where = "derivation"
    model = model_from_dict(_req(data, "model", where))
    try:
        return RampingDerivation(
            model=model,
            r=int(_req(data, "r", where)),
            delta=int(_req(data, "delta", where)),
            alphas=[E.parse(t) for t in _req(data, "alpha", where)],
            beta_u=E.parse(_req(data, "beta_u", where)),
            beta_rho=E.parse(_req(data, "beta_rho", where)),
            jac=[[E.parse(t) for t in row] for row in _req(data, "jacobian", where)],
            det_j=E.parse(_req(data, "det_j", where)),
            phi_names=[str(s) for s in _req(data, "phi", where)],
            nu_name=str(_req(data, "nu", where)),
            sign_u=int(_req(data, "sign_u", where)),
            sign_rho=int(_req(data, "sign_rho", where)),
            nominal=dict(data.get("nominal") or {}),
            probe=dict(data.get("probe") or {}),
        )
    except E.ExprSyntaxError as exc:
        raise InputError(f"derivation expression: {exc}") from exc


def save_derivation(d: RampingDerivation, path) -> None:
    dump_yaml(derivation_to_dict(d), path)


def load_derivation(path) -> RampingDerivation:
    return derivation_from_dict(load_yaml(path, DERIVATION_FORMAT))


# ---------------------------------------------------------------------------
# fitted limits and demand surrogates

def limits_to_dict(ls: AffineLimitSet) -> dict:
    return {
        "format": LIMITS_FORMAT,
        "model": ls.model,
        "delta": ls.delta,
        "phi": list(ls.phi_names),
        "nu_min": [float(v) for v in ls.nu_min],
        "nu_max": [float(v) for v in ls.nu_max],
        "box": [[float(a), float(b)] for a, b in ls.box],
        "counts": [int(c) for c in ls.counts],
        "static_limits": [float(ls.src[0]), float(ls.src[1])],
        "diagnostics": {
            "samples": ls.n_samples,
            "failed": ls.n_failed,
            "violation_min": float(ls.violation_min),
            "violation_max": float(ls.violation_max),
            "shift_min": float(ls.shift_min),
            "shift_max": float(ls.shift_max),
            "rcond": float(ls.rcond),
        },
    }


def limits_from_dict(data: Mapping) -> AffineLimitSet:
    where = "limits"
    delta = int(_req(data, "delta", where))
    lo = np.array([_num(v, "nu_min") for v in _req(data, "nu_min", where)])
    hi = np.array([_num(v, "nu_max") for v in _req(data, "nu_max", where)])
    if len(lo) != delta + 1 or len(hi) != delta + 1:
        raise InputError(f"limits: need {delta + 1} coefficients per side")
    box = [tuple(_num(v, "box") for v in b) for b in _req(data, "box", where)]
    if len(box) != delta:
        raise InputError(f"limits: box needs {delta} axes")
    diag = data.get("diagnostics") or {}
    src = _req(data, "static_limits", where)
    return AffineLimitSet(
        delta=delta,
        phi_names=[str(s) for s in _req(data, "phi", where)],
        nu_min=lo,
        nu_max=hi,
        box=box,
        counts=tuple(int(c) for c in _req(data, "counts", where)),
        violation_min=float(diag.get("violation_min", math.nan)),
        violation_max=float(diag.get("violation_max", math.nan)),
        shift_min=float(diag.get("shift_min", math.nan)),
        shift_max=float(diag.get("shift_max", math.nan)),
        src=(_num(src[0], "static_limits"), _num(src[1], "static_limits")),
        n_samples=int(diag.get("samples", 0)),
        n_failed=int(diag.get("failed", 0)),
        rcond=float(diag.get("rcond", math.nan)),
        model=str(data.get("model", "")),
    )


def save_limits(ls: AffineLimitSet, path) -> None:
    dump_yaml(limits_to_dict(ls), path)


def load_limits(path) -> AffineLimitSet:
    return limits_from_dict(load_yaml(path, LIMITS_FORMAT))


def demand_to_dict(ds: DemandSurrogate) -> dict:
    return {
        "format": DEMAND_FORMAT,
        "model": ds.model,
        "delta": ds.delta,
        "variables": list(ds.variables),
        "coefficients": {k: [float(v) for v in c] for k, c in ds.coef.items()},
        "nominal": {k: float(v) for k, v in ds.nominal.items()},
        "box": [[float(a), float(b)] for a, b in ds.box],
        "nu_range": [float(ds.nu_range[0]), float(ds.nu_range[1])],
        "counts": [int(c) for c in ds.counts],
        "diagnostics": {
            "samples": ds.n_samples,
            "skipped": ds.n_skipped,
            "avg_abs_dev": {k: float(v) for k, v in ds.avg_abs_dev.items()},
            "max_abs_dev": {k: float(v) for k, v in ds.max_abs_dev.items()},
        },
    }


def demand_from_dict(data: Mapping) -> DemandSurrogate:
    where = "demand surrogate"
    delta = int(_req(data, "delta", where))
    coef = {str(k): np.array([_num(v, "coefficients") for v in c])
            for k, c in dict(_req(data, "coefficients", where)).items()}
    for k, c in coef.items():
        if len(c) != delta + 2:
            raise InputError(f"demand surrogate: form {k!r} needs {delta + 2} coefficients")
    diag = data.get("diagnostics") or {}
    return DemandSurrogate(
        delta=delta,
        variables=[str(s) for s in _req(data, "variables", where)],
        coef=coef,
        nominal={str(k): _num(v, "nominal") for k, v in dict(_req(data, "nominal", where)).items()},
        avg_abs_dev=dict(diag.get("avg_abs_dev") or {}),
        max_abs_dev=dict(diag.get("max_abs_dev") or {}),
        n_samples=int(diag.get("samples", 0)),
        n_skipped=int(diag.get("skipped", 0)),
        counts=tuple(int(c) for c in data.get("counts") or ()),
        nu_range=tuple(float(v) for v in data.get("nu_range") or (math.nan, math.nan)),
        box=[tuple(float(v) for v in b) for b in data.get("box") or []],
        model=str(data.get("model", "")),
    )


def save_demand(ds: DemandSurrogate, path) -> None:
    dump_yaml(demand_to_dict(ds), path)


def load_demand(path) -> DemandSurrogate:
    return demand_from_dict(load_yaml(path, DEMAND_FORMAT))


# ---------------------------------------------------------------------------
# CSV

def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def read_csv(path, required: Sequence[str] = ()) -> dict[str, np.ndarray]:
    """Read a numeric CSV with a header row into columns."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    reader = csv.reader(_io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise InputError(f"{path}: empty file") from None
    missing = [c for c in required if c not in header]
    if missing:
        raise InputError(f"{path}: missing columns {missing}")
    cols: dict[str, list[float]] = {h: [] for h in header}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        for h, c in zip(header, row):
            try:
                cols[h].append(float(c))
            except ValueError:
                raise InputError(f"{path}:{lineno}: column {h!r} is not numeric: {c!r}") from None
    return {h: np.array(v, dtype=float) for h, v in cols.items()}
