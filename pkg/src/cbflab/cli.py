"""Command-line driver: ``cbflab <command> --config <path>``.

Exit codes: 0 when every command completed, 2 when an obstruction command
returned a Violated verdict, 1 on any error.
"""
from __future__ import annotations

import argparse
import contextlib
import enum
import json
import logging
import math
import sys
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import flow as flow_mod
from . import geometry as geometry_mod
from . import obstruction as obstruction_mod
from . import synthesis as synthesis_mod
from .config import COMMANDS, AnalysisConfig, ConfigError, fixture_path, load_config
from .flow import FlowOutError, LemmaHypothesisError, flow_out, verify_forward_invariance, verify_lemma1
from .geometry import (SafeSet, boundary_complex, boundary_sample, build_cubical_complex, classify_boundary,
                       euler_characteristic, regular_value_check, samples_to_csv)
from .obstruction import (InadmissiblePerturbation, Outcome, Theorem, brockett_check, candidate_perturbations,
                          check_neighborhood_family, check_theorem3)
from .synthesis import blend, build_local_cover, qp_filter, verify_strict
from .system import Box, ControlAffineSystem, FullSpace, ZeroController, closed_loop
from .zeros import verify_poincare_hopf

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
EXIT_OK, EXIT_ERROR, EXIT_VIOLATED = 0, 1, 2

TOLERANCE_TARGETS = {
    "tol_solve": "TOL_SOLVE",
    "gap_factor": "GAP_FACTOR",
    "eps_reg": "EPS_REG",
    "tol_inv": "TOL_INV",
    "tol_flowout": "TOL_FLOWOUT",
    "margin": "MARGIN",
}

TABLE_ROWS = [
    ("CBF", "T3", False, "{Z : dh_p Z_p <= 0 on the boundary}", "exists (p, u) in C x U with F(p, u) = Z_p"),
    ("CBF on D", "T4", False, "{Z : Z_p in W}", "exists (p, u) in V x U with F(p, u) = Z_p"),
    ("Strict CBF", "T5", False, "{Z : Z_p in W}", "exists (p, u) in C x U with F(p, u) = Z_p"),
    ("Brockett", "Brockett", True, "z in W", "exists (x, u) in R^n x R^m with f(x, u) = z"),
]


def to_jsonable(obj):
    """Recursively convert numpy values, enums and dataclasses for json."""
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj


@contextlib.contextmanager
def tolerance_overrides(tols: dict):
    """Temporarily replace module-level tolerances."""
    mods = [geometry_mod, flow_mod, obstruction_mod, synthesis_mod]
    saved = []
    try:
        for key, value in tols.items():
            attr = TOLERANCE_TARGETS[key]
            for mod in mods:
                if hasattr(mod, attr):
                    saved.append((mod, attr, getattr(mod, attr)))
                    setattr(mod, attr, float(value))
        yield
    finally:
        for mod, attr, value in reversed(saved):
            setattr(mod, attr, value)


@dataclass
class CommandResult:
    command: str
    status: str
    result: dict = field(default_factory=dict)
    wall_time: float = 0.0
    warnings: list = field(default_factory=list)
    violated: bool = False

    def to_dict(self) -> dict:
        return {"command": self.command, "status": self.status, "result": self.result,
                "wall_time": round(self.wall_time, 6), "warnings": self.warnings}


@dataclass
class Report:
    config: AnalysisConfig
    seed: int
    threads: int
    commands: list = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        if any(c.status == "error" for c in self.commands):
            return EXIT_ERROR
        if any(c.violated for c in self.commands):
            return EXIT_VIOLATED
        return EXIT_OK

    def outcomes(self) -> dict:
        """Theorem -> list of outcomes found anywhere in the command results."""
        found: dict = {}

        def walk(x):
            if isinstance(x, dict):
                if "theorem" in x and "outcome" in x:
                    found.setdefault(x["theorem"], []).append(x["outcome"])
                for v in x.values():
                    walk(v)
            elif isinstance(x, list):
                for v in x:
                    walk(v)

        for c in self.commands:
            walk(c.result)
        return found

    def comparison(self) -> list:
        out = self.outcomes()
        rows = []
        for label, th, unique, pert, cond in TABLE_ROWS:
            keys = [th] + (["Cor1"] if th == "T5" else [])
            seen = [o for k in keys for o in out.get(k, [])]
            if not seen:
                summary = "not run"
            elif "Violated" in seen:
                summary = "Violated"
            elif all(o == "NotViolated" for o in seen):
                summary = "NotViolated"
            else:
                summary = "Inconclusive"
            rows.append({"setting": label, "theorem": th, "unique_integrability_required": unique,
                         "perturbation": pert, "necessary_condition": cond, "outcome": summary})
        return rows

    def to_dict(self) -> dict:
        cfg = self.config
        return to_jsonable({
            "schema_version": SCHEMA_VERSION,
            "tool": {"name": "cbflab", "version": __version__},
            "config": {"name": cfg.name, "path": cfg.source, "sha256": cfg.digest},
            "seed": self.seed,
            "threads": self.threads,
            "resolution": cfg.safeset.resolution if cfg.safeset else None,
            "commands": [c.to_dict() for c in self.commands],
            "comparison": self.comparison(),
            "warnings": [w for c in self.commands for w in c.warnings],
            "exit_code": self.exit_code,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# --------------------------------------------------------------------------
# Helpers


def _need(cfg: AnalysisConfig, *parts: str) -> None:
    for p in parts:
        if getattr(cfg, p) is None:
            raise ConfigError(p, "required by this command but missing")


def analysis_field(cfg: AnalysisConfig):
    """The vector field analysed by classify/poincare-hopf/flow commands.

    Priority: an explicit ``field``; the closed loop with ``controller``; the
    closed loop with the QP safety filter around ``nominal`` (default zero).
    """
    if cfg.field is not None:
        return cfg.field, "field"
    if cfg.controller is not None:
        _need(cfg, "system")
        return closed_loop(cfg.system, cfg.controller), "controller"
    if (isinstance(cfg.system, ControlAffineSystem) and isinstance(cfg.system.input_set, (FullSpace, Box))
            and cfg.alpha is not None and cfg.safeset is not None):
        nominal = cfg.nominal or ZeroController(cfg.system.m)
        return closed_loop(cfg.system, qp_filter(cfg.system, cfg.safeset, cfg.alpha, nominal)), "qp_filter"
    raise ConfigError("field", "no vector field: give 'field', 'controller', or an alpha block for the QP filter")


def _complex_summary(S: SafeSet) -> dict:
    K = build_cubical_complex(S)
    out = {"chi": euler_characteristic(K), "counts": K.counts, "resolution": K.resolution,
           "stable_at": 2 * K.resolution, "compact": not K.clipped, "notes": K.notes}
    if S.n >= 2:
        out["boundary_chi"] = euler_characteristic(boundary_complex(K))
    return out


# --------------------------------------------------------------------------
# Commands


def cmd_euler(cfg: AnalysisConfig, ctx: dict) -> tuple[dict, bool]:
    _need(cfg, "safeset")
    S = cfg.safeset
    res = _complex_summary(S)
    try:
        rv = regular_value_check(S)
        res["regular_value"] = {"passed": rv.passed, "min_grad_norm": rv.min_grad_norm}
    except geometry_mod.GeometryError as exc:
        res["regular_value"] = {"passed": False, "error": str(exc)}
    _csv(ctx, "complex.csv", build_cubical_complex(S).to_csv())
    return res, False


def cmd_classify(cfg: AnalysisConfig, ctx: dict) -> tuple[dict, bool]:
    _need(cfg, "safeset")
    X, source = analysis_field(cfg)
    pts = boundary_sample(cfg.safeset, cfg.run["boundary_count"])
    rep = classify_boundary(cfg.safeset, X, pts)
    w = rep.worst()
    _csv(ctx, "boundary_samples.csv", samples_to_csv(pts, cfg.safeset))
    return {"field": source, "summary": rep.summary, "counts": rep.counts(), "samples": len(pts),
            "worst": {"point": w.point, "value": w.value, "label": w.label} if w else None}, False


def cmd_poincare_hopf(cfg: AnalysisConfig, ctx: dict) -> tuple[dict, bool]:
    _need(cfg, "safeset")
    X, source = analysis_field(cfg)
    rep = verify_poincare_hopf(X, cfg.safeset, cfg.run["boundary_count"])
    res = {"field": source, "chi": rep.euler_characteristic, "summary": rep.summary, "branch": rep.branch,
           "zero_found": rep.zero_found, "certificates": [c.to_dict() for c in rep.certificates],
           "theorem_contradiction": rep.theorem_contradiction, "notes": rep.notes}
    if rep.sequence is not None:
        s = rep.sequence
        res["perturbation_sequence"] = {"deltas": s.deltas, "increments": s.increments, "limit": s.limit,
                                        "limit_residual": s.limit_residual}
    return res, False


def cmd_obstruct_t3(cfg: AnalysisConfig, ctx: dict) -> tuple[dict, bool]:
    _need(cfg, "system", "safeset")
    fields = list(cfg.fields.values()) or [p for p in candidate_perturbations(cfg.safeset) if not p.scale_param]
    verdicts = []
    for Z in fields:
        try:
            v = check_theorem3(cfg.system, cfg.safeset, Z, seed=ctx["seed"],
                               boundary_count=cfg.run["boundary_count"])
            verdicts.append({"perturbation": Z.name, "admissible": True, **v.to_dict()})
        except InadmissiblePerturbation as exc:
            verdicts.append({"perturbation": Z.name, "admissible": False, "reason": str(exc),
                             "witness": exc.witness})
    violated = any(v.get("outcome") == Outcome.VIOLATED.value for v in verdicts)
    return {"verdicts": verdicts}, violated


def _default_theorems(cfg: AnalysisConfig) -> list:
    ths = ["T4", "T5"]
    if isinstance(cfg.system, ControlAffineSystem) and isinstance(cfg.system.input_set, FullSpace):
        ths.append("Cor1")
    return ths


def cmd_obstruct_family(cfg: AnalysisConfig, ctx: dict) -> tuple[dict, bool]:
    _need(cfg, "system", "safeset")
    fams = list(cfg.families.values()) or [p for p in candidate_perturbations(cfg.safeset) if p.scale_param]
    verdicts = []
    for Z in fams:
        for th in cfg.run["theorems"] or _default_theorems(cfg):
            v = check_neighborhood_family(cfg.system, cfg.safeset, Z, th, t0=cfg.run["t0_verify"],
                                          seed=ctx["seed"], boundary_count=cfg.run["boundary_count"])
            verdicts.append({"family": Z.name, **v.to_dict()})
    violated = any(v["outcome"] == Outcome.VIOLATED.value for v in verdicts)
    return {"verdicts": verdicts}, violated


def cmd_brockett(cfg: AnalysisConfig, ctx: dict) -> tuple[dict, bool]:
    _need(cfg, "system")
    xstar = cfg.run["xstar"] if cfg.run["xstar"] is not None else [0.0] * cfg.system.n
    v = brockett_check(cfg.system, xstar, cfg.run["ball_radius"], state_radius=cfg.run["state_radius"],
                       seed=ctx["seed"])
    return {"xstar": xstar, **v.to_dict()}, v.outcome is Outcome.VIOLATED


def cmd_flow_invariance(cfg: AnalysisConfig, ctx: dict) -> tuple[dict, bool]:
    _need(cfg, "safeset")
    X, source = analysis_field(cfg)
    rep = verify_forward_invariance(X, cfg.safeset, cfg.run["initial_count"], cfg.run["horizon"],
                                    threads=ctx["threads"])
    res = {"field": source, "passed": rep.passed, "min_h": rep.min_h, "initial_points": rep.initial_points,
           "horizon": rep.horizon, "worst_start": rep.worst_start, "exited": rep.exited,
           "failures": rep.failures, "notes": rep.notes}
    if rep.violating_trajectory is not None:
        tr = rep.violating_trajectory
        res["violating_trajectory"] = {"steps": len(tr.t), "t_end": tr.t[-1], "end": tr.end,
                                       "status": tr.status}
        _csv(ctx, "violating_trajectory.csv", tr.to_csv(cfg.safeset))
    return res, False


def cmd_flow_out(cfg: AnalysisConfig, ctx: dict) -> tuple[dict, bool]:
    _need(cfg, "safeset")
    S, t0 = cfg.safeset, cfg.run["t0"]
    F = flow_out(S, t0, 2 * t0, count=cfg.run["boundary_count"], threads=ctx["threads"])
    chi = euler_characteristic(build_cubical_complex(S))
    chi_t = euler_characteristic(build_cubical_complex(F.effective))
    res = {"t0": t0, "max_identity_error": F.max_identity_error, "boundary_samples": len(F.boundary_image),
           "chi": chi, "chi_inflated": chi_t, "chi_preserved": chi == chi_t,
           "nested": bool(np.all(S.value(F.boundary_image) < 0)), "effective_h": str(F.effective.h)}
    _csv(ctx, "flow_out.csv", F.to_csv())
    if cfg.alpha is not None:
        try:
            X, source = analysis_field(cfg)
        except ConfigError:
            X = None
        if X is not None:
            try:
                lem = verify_lemma1(S, X, cfg.alpha, t0)
                res["lemma1"] = {"field": source, "passed": lem.passed, "hypothesis_min_slack":
                                 lem.hypothesis_min_slack, "min_inward": lem.min_inward, "inward": lem.inward,
                                 "chi_preserved": lem.chi_preserved, "nested": lem.nested, "notes": lem.notes}
            except LemmaHypothesisError as exc:
                res["lemma1"] = {"field": source, "passed": False, "hypothesis_violated": str(exc),
                                 "witness": exc.witness}
    return res, False


def cmd_synthesize(cfg: AnalysisConfig, ctx: dict) -> tuple[dict, bool]:
    _need(cfg, "system", "safeset", "alpha")
    if not isinstance(cfg.system, ControlAffineSystem):
        raise ConfigError("system.type", "synthesis needs a control-affine system")
    margin = cfg.run["tolerances"].get("margin", synthesis_mod.MARGIN)
    patches = build_local_cover(cfg.system, cfg.safeset, cfg.alpha, t0=cfg.run["t0_verify"], margin=margin,
                                seed=ctx["seed"], boundary_count=cfg.run["boundary_count"])
    K = blend(patches)
    rep = verify_strict(cfg.system, cfg.safeset, cfg.alpha, K, t0=cfg.run["t0_verify"],
                        samples=cfg.run["verify_samples"], seed=ctx["seed"])
    rep.raise_for_failure()
    return {"patches": len(patches), "verify": rep.to_dict(), "controller": K.to_dict()}, False


def cmd_all(cfg: AnalysisConfig, ctx: dict) -> tuple[dict, bool]:
    """The four-step procedure: Controller, Perturbation, Zero, Input."""
    _need(cfg, "system", "safeset")
    steps = []
    chi = euler_characteristic(build_cubical_complex(cfg.safeset))
    steps.append({"step": "Setup", "chi": chi,
                  "note": "procedure applies when chi(C) != 0" if chi else "chi(C) = 0: theorems are silent"})
    try:
        X, source = analysis_field(cfg)
        b = classify_boundary(cfg.safeset, X, boundary_sample(cfg.safeset, cfg.run["boundary_count"]))
        steps.append({"step": "Controller", "field": source, "boundary": b.summary})
    except (ConfigError, synthesis_mod.SynthesisError) as exc:
        X = None
        steps.append({"step": "Controller", "field": None,
                      "note": f"no concrete controller ({exc}); a hypothetical continuous safe controller is assumed"})
    fields = list(cfg.fields.values()) or [p for p in candidate_perturbations(cfg.safeset) if not p.scale_param]
    adm = []
    S = cfg.safeset
    pts = boundary_sample(S, cfg.run["boundary_count"])
    for Z in fields:
        V = Z.values(pts)
        dz = S.dh(pts, V)
        tol = geometry_mod.tangent_tolerance(np.linalg.norm(V, axis=1), np.linalg.norm(S.grad(pts), axis=1))
        adm.append({"perturbation": Z.name, "admissible": bool(np.all(dz <= tol)), "max_dh_Z": float(dz.max())})
    steps.append({"step": "Perturbation", "candidates": adm})
    if X is not None:
        ph, _ = cmd_poincare_hopf(cfg, ctx)
        steps.append({"step": "Zero", "closed_loop": ph})
    else:
        steps.append({"step": "Zero", "note": "Proposition-type zero exists for F(p, kappa(p)) - Z_p by hypothesis"})
    t3, v3 = cmd_obstruct_t3(cfg, ctx)
    fam, vf = cmd_obstruct_family(cfg, ctx)
    inp = {"step": "Input", "theorem3": t3["verdicts"], "families": fam["verdicts"]}
    vb = False
    if cfg.run["xstar"] is not None:
        br, vb = cmd_brockett(cfg, ctx)
        inp["brockett"] = br
    steps.append(inp)
    return {"four_step": steps}, v3 or vf or vb


HANDLERS = {
    "euler": cmd_euler,
    "classify": cmd_classify,
    "poincare-hopf": cmd_poincare_hopf,
    "obstruct-t3": cmd_obstruct_t3,
    "obstruct-family": cmd_obstruct_family,
    "brockett": cmd_brockett,
    "flow-invariance": cmd_flow_invariance,
    "flow-out": cmd_flow_out,
    "synthesize": cmd_synthesize,
    "all": cmd_all,
}


def _csv(ctx: dict, name: str, text: str) -> None:
    d = ctx.get("csv_dir")
    if d:
        Path(d).mkdir(parents=True, exist_ok=True)
        (Path(d) / name).write_text(text)


def _error_payload(exc: Exception) -> dict:
    out = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("witness", "p", "path"):
        if getattr(exc, attr, None) is not None:
            out[attr] = to_jsonable(getattr(exc, attr))
    return out


def run(cfg: AnalysisConfig, commands, *, seed: int | None = None, threads: int | None = None,
        resolution: int | None = None, csv_dir: str | None = None) -> Report:
    """Run commands on a config and collect a report."""
    if isinstance(commands, str):
        commands = [commands]
    for c in commands:
        if c not in HANDLERS:
            raise ValueError(f"unknown command {c!r}; known: {', '.join(COMMANDS)}")
    if resolution is not None and cfg.safeset is not None:
        S = cfg.safeset
        cfg = replace(cfg, safeset=SafeSet(S.h, S.bbox, int(resolution), S.name))
    seed = cfg.run["seed"] if seed is None else seed
    threads = cfg.run["threads"] if threads is None else threads
    ctx = {"seed": seed, "threads": threads, "csv_dir": csv_dir}
    report = Report(cfg, seed, threads)
    with tolerance_overrides(cfg.run["tolerances"]):
        for c in commands:
            t = time.perf_counter()
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                try:
                    result, violated = HANDLERS[c](cfg, ctx)
                    cr = CommandResult(c, "ok", to_jsonable(result), violated=violated)
                except (ValueError, ArithmeticError, RuntimeError, KeyError, TypeError) as exc:
                    log.debug("command %s failed", c, exc_info=True)
                    cr = CommandResult(c, "error", _error_payload(exc))
            cr.wall_time = time.perf_counter() - t
            cr.warnings = sorted({str(w.message) for w in caught})
            report.commands.append(cr)
    return report


def _resolve_config(path: str) -> Path:
    p = Path(path)
    if p.is_file():
        return p
    try:
        return fixture_path(path)
    except FileNotFoundError:
        return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cbflab", description="Topological necessary conditions for safety "
                                 "with control barrier functions")
    ap.add_argument("command", choices=COMMANDS + ("run",),
                    help="analysis to run; 'run' executes the config's run.commands list")
    ap.add_argument("--config", required=True, help="YAML config path or bundled fixture name")
    ap.add_argument("--out", help="write the JSON report here instead of stdout")
    ap.add_argument("--seed", type=int, help="random seed (default: config run.seed, else 0)")
    ap.add_argument("--threads", type=int, help="worker threads for trajectory batches")
    ap.add_argument("--resolution", type=int, help="override the safe-set grid resolution")
    ap.add_argument("--csv-dir", help="directory for per-module CSV exports")
    ap.add_argument("--log-level", default="WARNING")
    ap.add_argument("--version", action="version", version=f"cbflab {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(_resolve_config(args.config))
    except (ConfigError, ValueError) as exc:
        print(f"cbflab: config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    commands = cfg.run["commands"] if args.command == "run" else [args.command]
    if not commands:
        print("cbflab: config has no run.commands", file=sys.stderr)
        return EXIT_ERROR
    for name, value in (("--threads", args.threads), ("--resolution", args.resolution)):
        if value is not None and value < 1:
            print(f"cbflab: {name} must be positive", file=sys.stderr)
            return EXIT_ERROR
    report = run(cfg, commands, seed=args.seed, threads=args.threads, resolution=args.resolution,
                 csv_dir=args.csv_dir)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    for c in report.commands:
        if c.status == "error":
            print(f"cbflab: {c.command} failed: {c.result.get('message')}", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
