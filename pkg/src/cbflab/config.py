"""Analysis configuration files.

A config is a YAML mapping with these sections (expressions are strings in
the expression language; states are x1..xn, inputs u1..um)::

    name: nonholonomic integrator
    system:
      type: affine              # or: general
      n: 3
      m: 2
      drift: ["0", "0", "0"]    # affine only
      inputs:                   # affine only: one n-vector per input field
        - ["1", "0", "x2"]
        - ["0", "1", "-x1"]
      dynamics: [...]           # general only: f(x, u), n components
      input_set: {type: full}   # full | box {lower, upper} | ball {radius}
                                # | sphere {radius} | points {points}
    safeset:
      h: "1 - x1^2 - x2^2"
      bbox: [[-1.5, 1.5], [-1.5, 1.5]]
      resolution: 64
    alpha: {type: linear, c: 1.0}   # linear | cubic {c} | expression {expr in r}
    field: ["-x1", "-x2"]           # optional explicit vector field X
    controller: ["-2*x1", "-2*x2"]  # optional feedback law, closed loop F(x, k(x))
    nominal: ["0", "0"]             # optional nominal law for the QP filter
    perturbations:
      radial: {field: ["x1", "x2"]}
      vertical: {family: ["0", "0", "eps"]}   # vanishing family in eps
    run:
      commands: [euler, brockett]
      seed: 0
      threads: 1
      xstar: [0, 0, 0]
      ...
      tolerances: {tol_solve: 1.0e-7}
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .dsl import Expression, ParseError, parse_expr
from .geometry import SafeSet
from .obstruction import PerturbationField
from .synthesis import AlphaFunction
from .system import (Ball, Box, ControlAffineSystem, ExpressionController, FinitePoints, FullSpace, GeneralSystem,
                     Sphere, VectorField, input_names, state_names)

COMMANDS = ("euler", "classify", "poincare-hopf", "obstruct-t3", "obstruct-family", "brockett",
            "flow-invariance", "flow-out", "synthesize", "all")

TOLERANCES = ("tol_solve", "gap_factor", "eps_reg", "tol_inv", "tol_flowout", "margin")

RUN_DEFAULTS = {
    "commands": [],
    "seed": 0,
    "threads": 1,
    "xstar": None,
    "ball_radius": 1.0,
    "state_radius": 0.25,
    "theorems": None,
    "t0": 0.2,
    "t0_verify": 0.05,
    "horizon": 10.0,
    "initial_count": 100,
    "boundary_count": 200,
    "verify_samples": 10_000,
    "tolerances": {},
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass
class AnalysisConfig:
    name: str
    system: ControlAffineSystem | GeneralSystem | None
    safeset: SafeSet | None
    alpha: AlphaFunction | None
    field: VectorField | None
    controller: ExpressionController | None
    nominal: ExpressionController | None
    perturbations: dict
    run: dict
    source: str = ""
    digest: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def families(self) -> dict:
        return {k: v for k, v in self.perturbations.items() if v.scale_param}

    @property
    def fields(self) -> dict:
        return {k: v for k, v in self.perturbations.items() if not v.scale_param}


def _get(d: dict, key: str, path: str, kind=None, required: bool = True, default=None):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected a mapping")
    if key not in d:
        if required:
            raise ConfigError(f"{path}.{key}", "missing")
        return default
    v = d[key]
    if kind is not None and not isinstance(v, kind):
        raise ConfigError(f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
    return v


def _expr(value, path: str, allowed: set[str]) -> Expression:
    if isinstance(value, bool) or not isinstance(value, (str, int, float)):
        raise ConfigError(path, "expected an expression string")
    try:
        e = parse_expr(str(value))
    except ParseError as exc:
        raise ConfigError(path, str(exc)) from None
    extra = e.free_vars() - allowed
    if extra:
        raise ConfigError(path, f"unknown variables {sorted(extra)}")
    return e


def _exprs(values, path: str, allowed: set[str], length: int | None = None) -> tuple:
    if not isinstance(values, list):
        raise ConfigError(path, "expected a list of expressions")
    if length is not None and len(values) != length:
        raise ConfigError(path, f"expected {length} components, got {len(values)}")
    return tuple(_expr(v, f"{path}[{i}]", allowed) for i, v in enumerate(values))


def _vector(values, path: str, length: int | None = None) -> np.ndarray:
    try:
        arr = np.asarray(values, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "expected numbers") from None
    if arr.ndim != 1 or (length is not None and len(arr) != length):
        raise ConfigError(path, f"expected a list of {length} numbers")
    return arr


def _positive(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
        raise ConfigError(path, "expected a positive number")
    return float(v)


def _input_set(d, path: str, m: int):
    if d is None:
        return FullSpace(m)
    kind = _get(d, "type", path, str)
    try:
        if kind == "full":
            return FullSpace(m)
        if kind == "box":
            return Box(tuple(_vector(_get(d, "lower", path), f"{path}.lower", m)),
                       tuple(_vector(_get(d, "upper", path), f"{path}.upper", m)))
        if kind == "ball":
            return Ball(_positive(_get(d, "radius", path), f"{path}.radius"), m)
        if kind == "sphere":
            return Sphere(_positive(_get(d, "radius", path), f"{path}.radius"), m)
        if kind == "points":
            pts = np.atleast_2d(np.asarray(_get(d, "points", path), dtype=float))
            if pts.shape[1] != m:
                raise ConfigError(f"{path}.points", f"points must have {m} coordinates")
            return FinitePoints(tuple(map(tuple, pts)))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from None
    raise ConfigError(f"{path}.type", f"unknown input set {kind!r}")


def _system(d, path: str):
    kind = _get(d, "type", path, str, required=False, default="affine")
    n = _get(d, "n", path, int)
    m = _get(d, "m", path, int)
    if n < 1 or m < 0:
        raise ConfigError(path, "need n >= 1 and m >= 0")
    xs, us = set(state_names(n)), set(input_names(m))
    iset = _input_set(d.get("input_set"), f"{path}.input_set", m)
    name = str(d.get("name", ""))
    if kind == "affine":
        drift = _exprs(_get(d, "drift", path), f"{path}.drift", xs, n)
        cols = _get(d, "inputs", path, list, required=m > 0, default=[])
        if len(cols) != m:
            raise ConfigError(f"{path}.inputs", f"expected {m} input fields, got {len(cols)}")
        inputs = tuple(_exprs(c, f"{path}.inputs[{i}]", xs, n) for i, c in enumerate(cols))
        return ControlAffineSystem(n, m, drift, inputs, iset, name=name)
    if kind == "general":
        dyn = _exprs(_get(d, "dynamics", path), f"{path}.dynamics", xs | us, n)
        return GeneralSystem(n, m, dyn, iset, name=name)
    raise ConfigError(f"{path}.type", f"unknown system type {kind!r}")


def _safeset(d, path: str, n: int | None) -> SafeSet:
    bbox = np.asarray(_get(d, "bbox", path), dtype=float)
    if bbox.ndim != 2 or bbox.shape[1] != 2:
        raise ConfigError(f"{path}.bbox", "expected a list of [lo, hi] pairs")
    if n is not None and len(bbox) != n:
        raise ConfigError(f"{path}.bbox", f"expected {n} axes, got {len(bbox)}")
    if np.any(bbox[:, 0] >= bbox[:, 1]):
        raise ConfigError(f"{path}.bbox", "need lo < hi on every axis")
    h = _expr(_get(d, "h", path), f"{path}.h", set(state_names(len(bbox))))
    res = _get(d, "resolution", path, int, required=False, default=64)
    if res < 2:
        raise ConfigError(f"{path}.resolution", "must be at least 2")
    return SafeSet(h, bbox, res, name=str(d.get("name", "")))


def _alpha(d, path: str) -> AlphaFunction:
    kind = _get(d, "type", path, str)
    try:
        if kind == "linear":
            return AlphaFunction.linear(_positive(d.get("c", 1.0), f"{path}.c"))
        if kind == "cubic":
            return AlphaFunction.cubic(_positive(d.get("c", 1.0), f"{path}.c"))
        if kind == "expression":
            return AlphaFunction.user(_expr(_get(d, "expr", path), f"{path}.expr", {"r"}))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from None
    raise ConfigError(f"{path}.type", f"unknown alpha type {kind!r}")


def _perturbations(d, path: str, n: int) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(path, "expected a mapping of named perturbations")
    out = {}
    xs = set(state_names(n))
    for name, spec in d.items():
        p = f"{path}.{name}"
        if not isinstance(spec, dict) or len({"field", "family"} & set(spec)) != 1:
            raise ConfigError(p, "expected exactly one of 'field' or 'family'")
        if "field" in spec:
            out[name] = PerturbationField(name, _exprs(spec["field"], f"{p}.field", xs, n))
        else:
            param = str(spec.get("parameter", "eps"))
            out[name] = PerturbationField(name, _exprs(spec["family"], f"{p}.family", xs | {param}, n), param)
    return out


def _run(d, path: str) -> dict:
    d = {} if d is None else d
    if not isinstance(d, dict):
        raise ConfigError(path, "expected a mapping")
    unknown = set(d) - set(RUN_DEFAULTS)
    if unknown:
        raise ConfigError(path, f"unknown keys {sorted(unknown)}")
    run = {**RUN_DEFAULTS, **d}
    cmds = run["commands"]
    if isinstance(cmds, str):
        cmds = [cmds]
    for i, c in enumerate(cmds):
        if c not in COMMANDS:
            raise ConfigError(f"{path}.commands[{i}]", f"unknown command {c!r}")
    run["commands"] = list(cmds)
    for key in ("ball_radius", "state_radius", "t0", "t0_verify", "horizon"):
        run[key] = _positive(run[key], f"{path}.{key}")
    for key in ("threads", "initial_count", "boundary_count", "verify_samples"):
        if not isinstance(run[key], int) or run[key] < 1:
            raise ConfigError(f"{path}.{key}", "expected a positive integer")
    if not isinstance(run["seed"], int) or run["seed"] < 0:
        raise ConfigError(f"{path}.seed", "expected a non-negative integer")
    tols = run["tolerances"] or {}
    if not isinstance(tols, dict):
        raise ConfigError(f"{path}.tolerances", "expected a mapping")
    for k, v in tols.items():
        if k not in TOLERANCES:
            raise ConfigError(f"{path}.tolerances.{k}", f"unknown tolerance; known: {', '.join(TOLERANCES)}")
        _positive(v, f"{path}.tolerances.{k}")
    if run["theorems"] is not None:
        ths = [run["theorems"]] if isinstance(run["theorems"], str) else list(run["theorems"])
        for i, t in enumerate(ths):
            if t not in ("T4", "T5", "Cor1"):
                raise ConfigError(f"{path}.theorems[{i}]", f"unknown theorem {t!r}")
        run["theorems"] = ths
    return run


def parse_config(raw: Any, source: str = "<config>", text: str | None = None) -> AnalysisConfig:
    """Validate a parsed YAML document into an :class:`AnalysisConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping")
    known = {"name", "system", "safeset", "alpha", "field", "controller", "nominal", "perturbations", "run"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError("<root>", f"unknown sections {sorted(unknown)}")
    system = _system(raw["system"], "system") if "system" in raw else None
    n = system.n if system else None
    safeset = _safeset(raw["safeset"], "safeset", n) if "safeset" in raw else None
    n = n or (safeset.n if safeset else None)
    alpha = _alpha(raw["alpha"], "alpha") if "alpha" in raw else None
    xs = set(state_names(n)) if n else set()

    vf = None
    if "field" in raw:
        if n is None:
            raise ConfigError("field", "needs a system or safeset to fix the dimension")
        vf = VectorField.from_expressions(_exprs(raw["field"], "field", xs, n), name="X")

    def law(key):
        if key not in raw:
            return None
        if system is None:
            raise ConfigError(key, "needs a system block")
        return ExpressionController(_exprs(raw[key], key, xs, system.m), n)

    controller, nominal = law("controller"), law("nominal")
    perts = _perturbations(raw.get("perturbations"), "perturbations", n) if n else {}
    run = _run(raw.get("run"), "run")
    if run["xstar"] is not None and n is not None:
        run["xstar"] = _vector(run["xstar"], "run.xstar", n).tolist()
    body = text if text is not None else yaml.safe_dump(raw, sort_keys=True)
    digest = hashlib.sha256(body.encode()).hexdigest()
    return AnalysisConfig(str(raw.get("name", Path(source).stem)), system, safeset, alpha, vf, controller, nominal,
                          perts, run, source, digest, raw)


def load_config(path: str | Path) -> AnalysisConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "no such file")
    text = path.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML: {exc}") from None
    return parse_config(raw, str(path), text)


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture config, by file name with or without suffix."""
    base = Path(__file__).parent / "fixtures"
    p = base / name
    if p.suffix == "":
        p = p.with_suffix(".yaml")
    if not p.is_file():
        raise FileNotFoundError(f"no bundled fixture {name!r}; available: {sorted(f.stem for f in base.glob('*.yaml'))}")
    return p
