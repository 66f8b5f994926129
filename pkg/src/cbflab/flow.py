"""Flows of vector fields: adaptive Dormand-Prince integration, forward
invariance checks and the flow-out inflation of a safe set."""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import (EPS_REG, SafeSet, Summary, boundary_sample, build_cubical_complex,
                       classify_boundary, euler_characteristic, _farthest_point_subset)
from .system import VectorField, state_names
from .zeros import PreconditionError

log = logging.getLogger(__name__)

TOL_INV = 1e-6
TOL_FLOWOUT = 1e-6

# Dormand-Prince 5(4) tableau
_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# 4th-order continuous extension (Shampine), y(t + s h) = y + h K^T P [s, s^2, s^3, s^4]
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


class IntegrationError(RuntimeError):
    pass


class BlowUpError(IntegrationError):
    def __init__(self, message: str, t: float):
        self.t = t
        super().__init__(message)


class DomainExitError(IntegrationError):
    pass


class FlowOutError(RuntimeError):
    pass


class LemmaHypothesisError(ValueError):
    def __init__(self, message: str, witness):
        self.witness = np.asarray(witness)
        super().__init__(message)


@dataclass
class Trajectory:
    t: np.ndarray
    y: np.ndarray
    stages: list = field(repr=False, default_factory=list)
    status: str = "completed"
    rejected: int = 0

    @property
    def end(self) -> np.ndarray:
        return self.y[-1]

    def __call__(self, t) -> np.ndarray:
        """Dense output at time(s) ``t`` inside the covered interval."""
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = min(self.t[0], self.t[-1]), max(self.t[0], self.t[-1])
        if np.any(ts < lo - 1e-12 * max(1, abs(lo))) or np.any(ts > hi + 1e-12 * max(1, abs(hi))):
            raise ValueError("dense output requested outside the integrated interval")
        fwd = self.t[-1] >= self.t[0]
        key = self.t if fwd else -self.t
        q = ts if fwd else -ts
        idx = np.clip(np.searchsorted(key, q, side="right") - 1, 0, max(len(self.t) - 2, 0))
        out = np.empty((len(ts), self.y.shape[1]))
        for j, (i, tt) in enumerate(zip(idx, ts)):
            if len(self.t) == 1:
                out[j] = self.y[0]
                continue
            hstep = self.t[i + 1] - self.t[i]
            s = (tt - self.t[i]) / hstep
            K = self.stages[i]
            out[j] = self.y[i] + hstep * (K.T @ (_P @ np.array([s, s * s, s ** 3, s ** 4])))
        return out if np.ndim(t) else out[0]

    def dense_samples(self, per_step: int = 10) -> tuple[np.ndarray, np.ndarray]:
        """States at ``per_step`` evenly spaced times inside every accepted step."""
        if len(self.t) == 1:
            return self.t.copy(), self.y.copy()
        s = np.arange(per_step) / per_step
        basis = _P @ np.stack([s, s ** 2, s ** 3, s ** 4])
        ts, ys = [], []
        for i in range(len(self.t) - 1):
            hstep = self.t[i + 1] - self.t[i]
            ts.append(self.t[i] + s * hstep)
            ys.append(self.y[i] + hstep * (self.stages[i].T @ basis).T)
        ts.append(self.t[-1:])
        ys.append(self.y[-1:])
        return np.concatenate(ts), np.concatenate(ys)

    def to_csv(self, S: SafeSet | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        n = self.y.shape[1]
        w.writerow(["t"] + state_names(n) + (["h"] if S is not None else []))
        hv = S.value(self.y) if S is not None else None
        for i in range(len(self.t)):
            row = [repr(float(self.t[i]))] + [repr(float(v)) for v in self.y[i]]
            if hv is not None:
                row.append(repr(float(hv[i])))
            w.writerow(row)
        return buf.getvalue()


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def _initial_step(f, t0, y0, f0, direction, rtol, atol) -> float:
    scale = atol + np.abs(y0) * rtol
    d0, d1 = _rms(y0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = f(y0 + h0 * direction * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def integrate(X: VectorField | Callable, p0, T: float, rtol: float = 1e-9, atol: float = 1e-12, *,
              bbox=None, on_exit: str = "stop", max_norm: float = 1e12, step: float | None = None,
              max_steps: int = 1_000_000) -> Trajectory:
    """Integrate p' = X(p) from p0 over [0, T] (T < 0 integrates backward).

    Adaptive embedded Runge-Kutta 5(4) (Dormand-Prince) with local error
    control by rtol/atol and 4th-order dense output. Passing ``step`` fixes
    the step size and disables error control. Leaving ``bbox`` either stops
    the trajectory (``on_exit="stop"``) or raises :class:`DomainExitError`.
    Raises :class:`BlowUpError` when |p| exceeds ``max_norm``, the state
    becomes non-finite, or the step size underflows.
    """
    f = X if not isinstance(X, VectorField) else X.__call__
    y = np.asarray(p0, dtype=float).copy()
    n = len(y)
    t, T = 0.0, float(T)
    direction = 1.0 if T >= 0 else -1.0
    ts, ys, Ks = [t], [y.copy()], []
    if bbox is not None:
        bbox = np.asarray(bbox, dtype=float)
    if T == 0:
        return Trajectory(np.array(ts), np.array(ys))
    fy = np.asarray(f(y), dtype=float)
    if not np.all(np.isfinite(fy)):
        raise IntegrationError(f"vector field not finite at the initial point {y.tolist()}")
    h = abs(step) if step is not None else _initial_step(f, t, y, fy, direction, rtol, atol)
    rejected = 0
    status = "completed"
    K = np.empty((7, n))
    for _ in range(max_steps):
        remaining = abs(T - t)
        slack = 64 * np.finfo(float).eps * max(1.0, abs(T))
        if remaining <= slack:
            t = T
            break
        if h >= remaining - slack:
            h = remaining
        if h < 10 * np.finfo(float).eps * max(1.0, abs(t)):
            raise BlowUpError(f"step size underflow at t={t:.6g}", t)
        hs = direction * h
        K[0] = fy
        for i in range(1, 6):
            K[i] = f(y + hs * (K[:i].T @ np.asarray(_A[i])))
        y_new = y + hs * (K[:6].T @ _B)
        f_new = np.asarray(f(y_new), dtype=float)
        K[6] = f_new
        if not (np.all(np.isfinite(y_new)) and np.all(np.isfinite(f_new))):
            if step is not None:
                raise BlowUpError(f"non-finite state at t={t + hs:.6g}", t + hs)
            h *= 0.2
            rejected += 1
            continue
        if step is None:
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = _rms(hs * (K.T @ _E) / scale)
            if err > 1.0:
                h *= max(0.2, 0.9 * err ** -0.2)
                rejected += 1
                continue
            factor = 10.0 if err == 0 else min(10.0, max(0.2, 0.9 * err ** -0.2))
        t = T if h == remaining else t + hs
        y, fy = y_new, f_new
        ts.append(t)
        ys.append(y.copy())
        Ks.append(K.copy())
        if float(np.linalg.norm(y)) > max_norm:
            raise BlowUpError(f"|x| exceeded {max_norm:g} at t={t:.6g} (finite escape)", t)
        if bbox is not None and np.any((y < bbox[:, 0]) | (y > bbox[:, 1])):
            if on_exit == "error":
                raise DomainExitError(f"trajectory left the bounding box at t={t:.6g}")
            status = "exited"
            break
        if step is None:
            h *= factor
    else:
        raise IntegrationError(f"step budget of {max_steps} exhausted at t={t:.6g}")
    return Trajectory(np.array(ts), np.array(ys), Ks, status, rejected)


def _pmap(fn, items, threads: int):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


# --------------------------------------------------------------------------
# Forward invariance


@dataclass
class InvarianceReport:
    min_h: float
    passed: bool
    initial_points: int
    horizon: float
    worst_start: np.ndarray | None = None
    violating_trajectory: Trajectory | None = None
    failures: list = field(default_factory=list)
    exited: int = 0
    notes: list = field(default_factory=list)


def initial_points(S: SafeSet, count: int) -> np.ndarray:
    nb = count // 2
    B = boundary_sample(S, nb) if nb else np.zeros((0, S.n))
    G = S.grid_points(max(8, S.resolution // 2))
    G = G[S.value(G) > 0]
    I = _farthest_point_subset(G, count - len(B))
    return np.concatenate([B, I])


def verify_forward_invariance(X: VectorField, S: SafeSet, initial_count: int = 100, T: float = 10.0,
                              rtol: float = 1e-9, atol: float = 1e-12, threads: int = 1) -> InvarianceReport:
    """Integrate from points of C for time T and track min h on dense output.

    Passes iff min h >= -1e-6. Finite horizon only.
    """
    P0 = initial_points(S, initial_count)

    def run(p):
        try:
            tr = integrate(X, p, T, rtol, atol, bbox=S.bbox, on_exit="stop")
        except IntegrationError as exc:
            return p, None, str(exc)
        _, Y = tr.dense_samples(10)
        return p, tr, float(np.min(S.value(Y)))

    results = _pmap(run, list(P0), threads)
    rep = InvarianceReport(math.inf, True, len(P0), T)
    worst = None
    for p, tr, val in results:
        if tr is None:
            rep.failures.append({"start": p.tolist(), "error": val})
            continue
        rep.exited += tr.status == "exited"
        if val < rep.min_h:
            rep.min_h, worst = val, (p, tr)
    rep.passed = rep.min_h >= -TOL_INV and not rep.failures
    if worst is not None:
        rep.worst_start = worst[0]
        if not rep.passed:
            rep.violating_trajectory = worst[1]
    if X.smooth is False:
        rep.notes.append("continuity-only field: trajectories are those chosen by the integrator")
    rep.notes.append("forward invariance checked on a finite horizon only")
    return rep


@dataclass
class StrictEntryReport:
    min_h: float
    passed: bool
    times: np.ndarray
    worst_start: np.ndarray | None = None


def strict_entry_check(X: VectorField, S: SafeSet, T: float = 1.0, count: int = 200,
                       t_min: float = 1e-4, threads: int = 1) -> StrictEntryReport:
    """Boundary starts of an inward field must enter the interior: h(phi_t(p)) > 0."""
    pts = boundary_sample(S, count)
    if classify_boundary(S, X, pts).summary is not Summary.ALL_INWARD:
        raise PreconditionError("field is not inward-pointing at every boundary sample")
    times = np.logspace(math.log10(t_min), math.log10(T), 20)

    def run(p):
        tr = integrate(X, p, T, bbox=S.bbox, on_exit="error")
        return float(np.min(S.value(tr(times))))

    mins = np.array(_pmap(run, list(pts), threads))
    i = int(np.argmin(mins))
    return StrictEntryReport(float(mins[i]), bool(mins[i] > 0), times, pts[i])


# --------------------------------------------------------------------------
# Flow-out


def outward_unit_rate_field(S: SafeSet) -> VectorField:
    """Y = -grad h / |grad h|^2, along which h decreases at unit rate."""
    def batch(P):
        G = S.grad(P)
        return -G / np.einsum("ij,ij->i", G, G)[:, None]
    return VectorField(None, S.n, batch, name="-grad h/|grad h|^2")


@dataclass
class FlowOutSet:
    t0: float
    inner: SafeSet
    boundary_image: np.ndarray
    effective: SafeSet
    max_identity_error: float
    starts: np.ndarray = field(repr=False, default=None)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        n = self.boundary_image.shape[1]
        w.writerow([f"{v}_0" for v in state_names(n)] + [f"{v}_t0" for v in state_names(n)] + ["h_t0"])
        hv = self.inner.value(self.boundary_image)
        for p, q, hq in zip(self.starts, self.boundary_image, hv):
            w.writerow([repr(float(v)) for v in p] + [repr(float(v)) for v in q] + [repr(float(hq))])
        return buf.getvalue()


def check_band(S: SafeSet, t1: float) -> tuple[float, np.ndarray | None]:
    """min |grad h| over grid vertices with -t1 <= h <= 0."""
    r = S.resolution
    mesh = np.meshgrid(*S.axes(r), indexing="ij")
    P = np.stack([m.ravel() for m in mesh], 1)
    hv = S.value(P)
    P = P[(hv >= -t1) & (hv <= 0)]
    if len(P) == 0:
        return math.inf, None
    g = np.linalg.norm(S.grad(P), axis=1)
    bad = ~np.isfinite(g)
    if bad.any():
        warnings.warn(f"grad h undefined at {int(bad.sum())} band samples; skipped", stacklevel=3)
        P, g = P[~bad], g[~bad]
    if len(g) == 0:
        return math.inf, None
    i = int(np.argmin(g))
    return float(g[i]), P[i]


def flow_out(S: SafeSet, t0: float, t1: float | None = None, count: int = 200,
             threads: int = 1) -> FlowOutSet:
    """Inflate C by flowing its boundary along -grad h/|grad h|^2 for time t0.

    Along this field h(phi_t(p)) = -t for boundary points p; the identity is
    checked at t0/4, t0/2 and t0. The inflated set is {h + t0 >= 0}.
    """
    t1 = 2 * t0 if t1 is None else t1
    if not 0 < t0 < t1:
        raise ValueError("need 0 < t0 < t1")
    gmin, witness = check_band(S, t1)
    if gmin < EPS_REG:
        raise FlowOutError(f"h has a critical point in the band -{t1} <= h <= 0 near {witness.tolist()} "
                           f"(|grad h| = {gmin:.3g})")
    Y = outward_unit_rate_field(S)
    pts = boundary_sample(S, count)
    checks = np.array([t0 / 4, t0 / 2, t0])

    def run(p):
        tr = integrate(Y, p, t0, rtol=1e-10, atol=1e-13)
        Q = tr(checks)
        return Q[-1], float(np.max(np.abs(S.value(Q) + checks)))

    res = _pmap(run, list(pts), threads)
    image = np.array([r[0] for r in res])
    errs = np.array([r[1] for r in res])
    worst = float(errs.max())
    if worst > TOL_FLOWOUT:
        i = int(np.argmax(errs))
        raise FlowOutError(f"decay identity violated by {worst:.3g} starting from {pts[i].tolist()}")
    eff = S.shifted(t0, name=f"flowout({S.name or 'C'}, {t0})")
    return FlowOutSet(t0, S, image, eff, worst, pts)


@dataclass
class Lemma1Report:
    t0: float
    hypothesis_min_slack: float
    chi: int
    chi_inflated: int
    chi_preserved: bool
    min_inward: float
    inward: bool
    identity_error: float
    nested: bool
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.chi_preserved and self.inward and self.nested


def verify_lemma1(S: SafeSet, X: VectorField, alpha: Callable, t0: float,
                  band_upper: float | None = None) -> Lemma1Report:
    """Check the flow-out construction against a field X with dh X >= -alpha(h).

    The hypothesis is sampled on grid vertices with -t0 <= h <= band_upper
    (default t0); then the inflated set must keep the Euler characteristic
    and X must point strictly inward on its boundary image.
    """
    upper = t0 if band_upper is None else band_upper
    mesh = np.meshgrid(*S.axes(), indexing="ij")
    P = np.stack([m.ravel() for m in mesh], 1)
    hv = S.value(P)
    sel = (hv >= -t0) & (hv <= upper)
    P, hv = P[sel], hv[sel]
    slack = S.dh(P, X.batch(P)) + np.asarray(alpha(hv), dtype=float)
    if len(slack) == 0:
        raise FlowOutError("no grid samples in the hypothesis band")
    i = int(np.argmin(slack))
    if slack[i] < -1e-8:
        raise LemmaHypothesisError(f"dh X >= -alpha(h) fails by {-slack[i]:.3g}", P[i])
    F = flow_out(S, t0, 2 * t0)
    chi = euler_characteristic(build_cubical_complex(S))
    chi_t = euler_characteristic(build_cubical_complex(F.effective))
    inward = S.dh(F.boundary_image, X.batch(F.boundary_image))
    # nesting: boundary images sit at level -t0 < 0, i.e. strictly outside C
    nested = bool(np.all(S.value(F.boundary_image) < 0))
    rep = Lemma1Report(t0, float(slack[i]), chi, chi_t, chi == chi_t, float(inward.min()),
                       bool(inward.min() > 0), F.max_identity_error, nested)
    rep.notes.append("diffeomorphism is checked through Euler characteristic equality and nesting only")
    if chi != chi_t:
        rep.notes.append("Euler characteristic mismatch: grid may be under-resolved")
    return rep
