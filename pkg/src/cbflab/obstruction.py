"""Necessary-condition checks: solvability of F(p, u) = Z_p over regions of
state space, perturbation families and Brockett's condition.

A Violated verdict is backed by every sampled attempt being Unsolvable; a
NotViolated verdict only reports that solving pairs were found and is not a
proof that a barrier function or safe controller exists.
"""
from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dsl import Const, Expression, parse_expr, substitute
from .geometry import (GeometryError, SafeSet, boundary_sample, build_cubical_complex, euler_characteristic,
                       tangent_tolerance)
from .system import (Ball, Box, ControlAffineSystem, FinitePoints, FullSpace, GeneralSystem, Sphere,
                     VectorField, state_names)

log = logging.getLogger(__name__)

TOL_SOLVE = 1e-7
GAP_FACTOR = 100.0
SVD_CUTOFF = 1e-10
STEP_TOL = 1e-10
STARTS = 20
DEFAULT_LADDER = tuple(2.0 ** -k for k in range(1, 11))
REFINE_CAP = 200_000


class Status(str, enum.Enum):
    SOLVABLE = "Solvable"
    UNSOLVABLE = "Unsolvable"
    INCONCLUSIVE = "Inconclusive"


class Outcome(str, enum.Enum):
    VIOLATED = "Violated"
    NOT_VIOLATED = "NotViolated"
    INCONCLUSIVE = "Inconclusive"


class Theorem(str, enum.Enum):
    T3 = "T3"
    T4 = "T4"
    T5 = "T5"
    COR1 = "Cor1"
    BROCKETT = "Brockett"


class InadmissiblePerturbation(ValueError):
    def __init__(self, message: str, witness):
        self.witness = np.asarray(witness)
        super().__init__(message)


class UnsupportedInputSet(ValueError):
    pass


def tol_solve(z) -> float:
    return TOL_SOLVE * (1.0 + float(np.linalg.norm(z)))


def classify_residual(residual: float, z, converged: bool = True) -> Status:
    tol = tol_solve(z)
    if residual <= tol:
        return Status.SOLVABLE
    if residual > GAP_FACTOR * tol and converged:
        return Status.UNSOLVABLE
    return Status.INCONCLUSIVE


@dataclass
class SolvabilityResult:
    status: Status
    residual: float
    p: np.ndarray
    u: np.ndarray
    z: np.ndarray
    method: str
    converged: bool = True

    def to_dict(self) -> dict:
        return {"status": self.status.value, "residual": float(self.residual), "p": self.p.tolist(),
                "u": self.u.tolist(), "z": self.z.tolist(), "method": self.method,
                "converged": self.converged}


# --------------------------------------------------------------------------
# Exact span solvability


def span_residuals(sys: ControlAffineSystem, P, Z) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares u and residual of G(p) u = z - drift(p), row by row."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Z = np.broadcast_to(np.atleast_2d(np.asarray(Z, dtype=float)), P.shape)
    d, G = sys.drift_and_matrix(P)
    b = Z - d
    if sys.m == 0:
        return np.zeros((len(P), 0)), np.linalg.norm(b, axis=1)
    Uw, s, Vt = np.linalg.svd(G, full_matrices=False)
    cutoff = SVD_CUTOFF * s[:, :1]
    inv = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    coef = np.einsum("knr,kn->kr", Uw, b) * inv
    U = np.einsum("krm,kr->km", Vt, coef)
    res = np.linalg.norm(np.einsum("knm,km->kn", G, U) - b, axis=1)
    return U, res


def span_solvability(sys: ControlAffineSystem, p, z) -> SolvabilityResult:
    """Solve X0(p) + G(p) u = z over u in R^m by SVD least squares."""
    if not isinstance(sys, ControlAffineSystem):
        raise TypeError("span solvability needs a control-affine system")
    if not isinstance(sys.input_set, FullSpace):
        raise UnsupportedInputSet("span solvability needs unconstrained inputs; use constrained_solvability")
    p = np.asarray(p, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1)
    U, res = span_residuals(sys, p[None], z[None])
    return SolvabilityResult(classify_residual(res[0], z), float(res[0]), p, U[0], z, "ExactSpan")


# --------------------------------------------------------------------------
# Constrained solvability: multi-start projected gradient


def _fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count) + 0.5
    theta = np.arccos(1 - 2 * i / count)
    phi = math.pi * (1 + 5 ** 0.5) * i
    return np.stack([theta, np.mod(phi, 2 * math.pi)], 1)


class _Param:
    """Parametrization u = u(w) of an input set for descent methods."""

    def __init__(self, s, m: int):
        self.s = s
        self.m = m
        if isinstance(s, Sphere) and m in (2, 3):
            self.kind = "angles"
            self.dim = m - 1
        elif isinstance(s, Sphere) and m == 1:
            self.kind = "fixed"
            self.dim = 0
        elif isinstance(s, FinitePoints):
            self.kind = "fixed"
            self.dim = 0
        else:
            self.kind = "direct"
            self.dim = m

    def fixed_inputs(self) -> np.ndarray:
        if isinstance(self.s, FinitePoints):
            return self.s.array
        return np.array([[-self.s.radius], [self.s.radius]])

    def starts(self, count: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        s, m = self.s, self.m
        if self.kind == "angles":
            if m == 2:
                return (2 * math.pi * np.arange(count) / count)[:, None]
            return _fibonacci_sphere(count)
        if isinstance(s, Box):
            lo, hi = np.array(s.lower), np.array(s.upper)
            W = rng.uniform(lo, hi, size=(count, m))
            W[0] = (lo + hi) / 2
            return W
        if isinstance(s, Ball):
            W = rng.normal(size=(count, m))
            W *= (s.radius * rng.uniform(size=(count, 1)) ** (1 / max(m, 1))
                  / np.maximum(np.linalg.norm(W, axis=1, keepdims=True), 1e-300))
            W[0] = 0.0
            return W
        if isinstance(s, Sphere):
            W = rng.normal(size=(count, m))
            return s.radius * W / np.linalg.norm(W, axis=1, keepdims=True)
        W = rng.normal(scale=scale, size=(count, m))
        W[0] = 0.0
        return W

    def inputs(self, W: np.ndarray):
        """Return u(w) and du/dw with shape (K, m, dim)."""
        if self.kind == "angles":
            r = self.s.radius
            if self.m == 2:
                th = W[:, 0]
                U = r * np.stack([np.cos(th), np.sin(th)], 1)
                D = r * np.stack([-np.sin(th), np.cos(th)], 1)[:, :, None]
                return U, D
            th, ph = W[:, 0], W[:, 1]
            st, ct, sp, cp = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
            U = r * np.stack([st * cp, st * sp, ct], 1)
            D = r * np.stack([np.stack([ct * cp, -st * sp], 1),
                              np.stack([ct * sp, st * cp], 1),
                              np.stack([-st, np.zeros_like(st)], 1)], 1)
            return U, D
        return W, None

    def project(self, W: np.ndarray) -> np.ndarray:
        if self.kind == "direct":
            return self.s.project(W)
        return W


@dataclass
class _Batch:
    residual: np.ndarray
    P: np.ndarray
    U: np.ndarray
    converged: np.ndarray


def _residual_search(sys, P0, Z, *, state_box=None, starts: int = STARTS, seed: int = 0,
                     max_iter: int = 5000) -> _Batch:
    """min |F(p, u) - z| per row of (P0, Z) over u in the input set, and over
    p in ``state_box`` when given: an (n, 2) array of bounds shared by all
    rows, or (N, n, 2) for one box per row."""
    P0 = np.atleast_2d(np.asarray(P0, dtype=float))
    Z = np.broadcast_to(np.atleast_2d(np.asarray(Z, dtype=float)), P0.shape).copy()
    N, n, m = len(P0), sys.n, sys.m
    s = sys.input_set
    param = _Param(s, m)
    rng = np.random.default_rng(seed)
    optimize_x = state_box is not None
    general = sys.to_general() if isinstance(sys, ControlAffineSystem) and optimize_x else sys

    # rows = point x start
    if param.kind == "fixed":
        Ufix = param.fixed_inputs()
        S_ = len(Ufix)
        Wu = np.zeros((N * S_, 0))
        Urows = np.tile(Ufix, (N, 1))
    else:
        S_ = starts
        Wu = np.concatenate([param.starts(starts, rng, 1.0 + float(np.linalg.norm(Z[i]))) for i in range(N)])
        Urows = None
    rowP = np.repeat(P0, S_, axis=0)
    rowZ = np.repeat(Z, S_, axis=0)
    if optimize_x:
        box = np.broadcast_to(np.asarray(state_box, dtype=float), (N, n, 2))
        row_lo = np.repeat(box[:, :, 0], S_, axis=0)
        row_hi = np.repeat(box[:, :, 1], S_, axis=0)
        Xs = rng.uniform(row_lo, row_hi)
        Xs[::S_] = np.clip(P0, box[:, :, 0], box[:, :, 1])
        W0 = np.concatenate([Xs, Wu], 1)
    else:
        W0 = Wu
    if param.kind == "fixed" and not optimize_x:
        F = sys.dynamics_batch(rowP, Urows)
        res = np.linalg.norm(F - rowZ, axis=1).reshape(N, S_)
        best = np.argmin(res, axis=1)
        rows = np.arange(N) * S_ + best
        return _Batch(res[np.arange(N), best], P0.copy(), Urows[rows], np.ones(N, dtype=bool))

    affine_fixed = isinstance(sys, ControlAffineSystem) and not optimize_x
    if affine_fixed:
        d, G = sys.drift_and_matrix(rowP)

    def split(W):
        if optimize_x:
            return W[:, :n], W[:, n:]
        return rowP_cur, W

    def residual(W):
        """Residual F - z and its Jacobian with respect to the search variables."""
        Px, Wp = split(W)
        if param.kind == "fixed":
            U, D = Urows_cur, None
        else:
            U, D = param.inputs(Wp)
        if affine_fixed:
            F = d_cur + np.einsum("knm,km->kn", G_cur, U)
            Ju, Jx = G_cur, None
        else:
            F = general.dynamics_batch(Px, U)
            J = general.jacobian_batch(Px, U)
            Jx, Ju = J[:, :, :n], J[:, :, n:]
        if param.kind == "fixed":
            Ju = np.zeros((len(W), n, 0))
        elif D is not None:
            Ju = np.einsum("knm,kmq->knq", Ju, D)
        Jw = np.concatenate([Jx, Ju], 2) if optimize_x else Ju
        return F - Z_cur, Jw

    def project(W, rows):
        if optimize_x:
            Px = np.clip(W[:, :n], row_lo[rows], row_hi[rows])
            return np.concatenate([Px, param.project(W[:, n:])], 1)
        return param.project(W)

    def residual_rows(W, rows):
        # the residual reads the active-row slices through these names
        nonlocal rowP_cur, Z_cur, d_cur, G_cur, Urows_cur
        rowP_cur, Z_cur = rowP[rows], rowZ[rows]
        if affine_fixed:
            d_cur, G_cur = d[rows], G[rows]
        if Urows is not None:
            Urows_cur = Urows[rows]
        return residual(W)

    rowP_cur = Z_cur = d_cur = G_cur = Urows_cur = None

    # projected Levenberg-Marquardt with Marquardt diagonal scaling
    dim = W0.shape[1]
    W = project(W0.copy(), np.arange(len(W0)))
    r, J = residual_rows(W, np.arange(len(W)))
    f = 0.5 * np.einsum("ij,ij->i", r, r)
    lam = np.full(len(W), 1e-3)
    conv = np.zeros(len(W), dtype=bool)
    eye = np.eye(dim)
    lo = np.full((len(W), dim), -np.inf)
    hi = np.full((len(W), dim), np.inf)
    if optimize_x:
        lo[:, :n], hi[:, :n] = row_lo, row_hi
    if param.kind == "direct" and isinstance(s, Box):
        lo[:, dim - m:], hi[:, dim - m:] = s.lower, s.upper
    for it in range(max_iter):
        act = np.flatnonzero(~conv)
        if len(act) == 0:
            break
        Ja, ra, la = J[act], r[act], lam[act]
        JtJ = np.einsum("kni,knj->kij", Ja, Ja)
        g = np.einsum("kni,kn->ki", Ja, ra)
        diag = np.einsum("kii->ki", JtJ)
        A = JtJ + la[:, None, None] * (eye * (diag + 1e-12 * (1.0 + diag.max(axis=1, keepdims=True)))[:, None, :])
        # bound-constrained coordinates pushed outward are frozen for this step
        Wa = W[act]
        frozen = ((Wa <= lo[act]) & (g > 0)) | ((Wa >= hi[act]) & (g < 0))
        if frozen.any():
            keep = ~frozen
            A = A * keep[:, :, None] * keep[:, None, :] + eye * frozen[:, None, :]
            g = g * keep
        delta = np.linalg.solve(A, -g[..., None])[..., 0]
        cand = project(W[act] + delta, act)
        rc, Jc = residual_rows(cand, act)
        fc = 0.5 * np.einsum("ij,ij->i", rc, rc)
        ok = np.isfinite(fc) & (fc <= f[act])
        step = np.linalg.norm(cand - W[act], axis=1)
        acc = act[ok]
        W[acc], r[acc], J[acc], f[acc] = cand[ok], rc[ok], Jc[ok], fc[ok]
        lam[acc] = np.maximum(la[ok] * 0.3, 1e-12)
        lam[act[~ok]] = la[~ok] * 10.0
        conv[acc[step[ok] < STEP_TOL]] = True
        conv[act[~ok & (la * 10.0 > 1e16)]] = True
        conv |= f <= 0.5 * (1e-3 * TOL_SOLVE) ** 2
    log.debug("residual search: %d rows, %d iterations", len(W), it + 1)

    res = np.sqrt(2 * np.maximum(f, 0)).reshape(N, S_)
    best = np.argmin(np.where(np.isfinite(res), res, np.inf), axis=1)
    rows = np.arange(N) * S_ + best
    Px, Wp = (W[:, :n], W[:, n:]) if optimize_x else (rowP, W)
    U = Urows if param.kind == "fixed" else param.inputs(Wp)[0]
    return _Batch(res[np.arange(N), best], Px[rows], U[rows], conv[rows])


def _statuses(batch: _Batch, Z) -> list[Status]:
    Z = np.atleast_2d(Z)
    return [classify_residual(r, z, c) for r, z, c in zip(batch.residual, Z, batch.converged)]


def constrained_solvability(sys, p, z, starts: int = STARTS, seed: int = 0) -> SolvabilityResult:
    """min over u in U of |F(p, u) - z| by multi-start projected gradient.

    Box/Ball: projected gradient on u; Sphere: angle parametrization (m <= 3)
    or enumeration of {-r, r} for m = 1; FinitePoints: enumeration.
    Non-converged searches above the solvable threshold are Inconclusive.
    """
    if isinstance(sys.input_set, FullSpace):
        if isinstance(sys, ControlAffineSystem):
            return span_solvability(sys, p, z)
    elif isinstance(sys.input_set, Sphere) and sys.m > 3:
        raise UnsupportedInputSet("sphere input sets are supported for m <= 3")
    p = np.asarray(p, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1)
    b = _residual_search(sys, p[None], z[None], starts=starts, seed=seed)
    return SolvabilityResult(classify_residual(b.residual[0], z, bool(b.converged[0])), float(b.residual[0]),
                             p, b.U[0], z, "ConstrainedSearch", bool(b.converged[0]))


def solvability_batch(sys, P, Z, seed: int = 0) -> tuple[list[Status], _Batch, str]:
    """Point-wise solvability at fixed states, dispatching on the input set."""
    P = np.atleast_2d(P)
    Z = np.broadcast_to(np.atleast_2d(Z), P.shape)
    if isinstance(sys, ControlAffineSystem) and isinstance(sys.input_set, FullSpace):
        U, res = span_residuals(sys, P, Z)
        b = _Batch(res, P.copy(), U, np.ones(len(P), dtype=bool))
        return _statuses(b, Z), b, "ExactSpan"
    if isinstance(sys.input_set, Sphere) and sys.m > 3:
        raise UnsupportedInputSet("sphere input sets are supported for m <= 3")
    b = _residual_search(sys, P, Z, seed=seed)
    return _statuses(b, Z), b, "ConstrainedSearch"


REFINE_COUNT = 64


def _difference_system(sys, Z: "PerturbationField", eps: float | None) -> GeneralSystem:
    """The system (x, u) -> F(x, u) - Z_eps(x), whose zeros solve F = Z."""
    dyn = sys.to_general().dynamics if isinstance(sys, ControlAffineSystem) else sys.dynamics
    zs = Z.exprs
    if Z.scale_param:
        zs = tuple(substitute(e, {Z.scale_param: float(eps)}) for e in zs)
    return GeneralSystem(sys.n, sys.m, tuple(f - z for f, z in zip(dyn, zs)), sys.input_set, name="F - Z")


def region_solvability(sys, region: SafeSet, P, Z: "PerturbationField", eps: float | None = None, *,
                       seed: int = 0, refine: int = REFINE_COUNT) -> tuple[list[Status], _Batch, str]:
    """Solvability of F(p, u) = Z_p at the sample points P of ``region``.

    When no sample is Solvable, the ``refine`` lowest-residual samples are
    re-searched jointly over (p, u) with p in a one-cell box around the
    sample; refined points are kept only if they stay inside the region.
    Solution sets of positive codimension are thereby not missed between
    samples.
    """
    P = np.atleast_2d(P)
    Zv = Z.values(P, eps)
    statuses, b, method = solvability_batch(sys, P, Zv, seed)
    if refine <= 0 or any(st is Status.SOLVABLE for st in statuses):
        return statuses, b, method
    idx = np.argsort(b.residual, kind="stable")[:refine]
    delta = float(region.spacing().max())
    lo = np.maximum(P[idx] - delta, region.bbox[:, 0])
    hi = np.minimum(P[idx] + delta, region.bbox[:, 1])
    diff = _difference_system(sys, Z, eps)
    rb = _residual_search(diff, P[idx], np.zeros((len(idx), sys.n)), state_box=np.stack([lo, hi], -1), seed=seed)
    better = region.contains(rb.P) & (rb.residual < b.residual[idx])
    if better.any():
        j = idx[better]
        b.residual[j], b.P[j], b.U[j], b.converged[j] = (rb.residual[better], rb.P[better], rb.U[better],
                                                        rb.converged[better])
        Zv = Z.values(b.P, eps)
        method += "+JointRefinement"
    return _statuses(b, Zv), b, method


# --------------------------------------------------------------------------
# Perturbation fields


@dataclass
class PerturbationField:
    """A state-dependent vector field Z, optionally scaled by a parameter."""

    name: str
    exprs: tuple
    scale_param: str | None = None
    admissible: bool | None = None

    def __post_init__(self):
        self.exprs = tuple(parse_expr(e) if isinstance(e, str) else e for e in self.exprs)
        n = len(self.exprs)
        allowed = set(state_names(n)) | ({self.scale_param} if self.scale_param else set())
        for e in self.exprs:
            extra = e.free_vars() - allowed
            if extra:
                raise ValueError(f"perturbation {self.name!r} references unknown variables {sorted(extra)}")

    @property
    def n(self) -> int:
        return len(self.exprs)

    def field(self, eps: float | None = None) -> VectorField:
        params = {}
        if self.scale_param:
            if eps is None:
                raise ValueError(f"family {self.name!r} needs a value for {self.scale_param}")
            params[self.scale_param] = float(eps)
        return VectorField.from_expressions(self.exprs, name=self.name, params=params)

    def values(self, P, eps: float | None = None) -> np.ndarray:
        return self.field(eps).batch(P)

    def to_dict(self) -> dict:
        return {"name": self.name, "field": [str(e) for e in self.exprs], "scale": self.scale_param,
                "admissible": self.admissible}


def candidate_perturbations(S: SafeSet, user_fields: dict | None = None) -> list[PerturbationField]:
    """Built-in perturbations.

    For the non-strict check: -c grad h (c = 0.1, 1) and Z = 0. For the
    neighbourhood/strict checks: eps * e_i and eps * (user field).
    Admissibility is left unverified here.
    """
    n = S.n
    out = []
    for c in (0.1, 1.0):
        out.append(PerturbationField(f"neg_grad_h_{c:g}", tuple(Const(-c) * g for g in S.grad_exprs)))
    out.append(PerturbationField("zero", tuple(Const(0.0) for _ in range(n))))
    for i in range(n):
        comps = tuple(parse_expr("eps") if j == i else Const(0.0) for j in range(n))
        out.append(PerturbationField(f"eps_e{i + 1}", comps, "eps"))
    for name, exprs in (user_fields or {}).items():
        exprs = [parse_expr(e) if isinstance(e, str) else e for e in exprs]
        out.append(PerturbationField(f"eps_{name}", tuple(parse_expr("eps") * e for e in exprs), "eps"))
    return out


# --------------------------------------------------------------------------
# Verdicts


@dataclass
class ObstructionVerdict:
    theorem: Theorem
    outcome: Outcome
    witness: dict = field(default_factory=dict)
    residual_statistics: dict = field(default_factory=dict)
    sampled_points: int = 0
    epsilon_ladder: list = field(default_factory=list)
    region: str = "C"
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"theorem": self.theorem.value, "outcome": self.outcome.value, "witness": self.witness,
                "residual_statistics": self.residual_statistics, "sampled_points": self.sampled_points,
                "epsilon_ladder": self.epsilon_ladder, "region": self.region, "notes": self.notes}


def _stats(res: np.ndarray, P: np.ndarray, statuses: list[Status]) -> dict:
    i = int(np.argmin(res))
    return {"min": float(res[i]), "max": float(res.max()), "mean": float(res.mean()),
            "argmin": P[i].tolist(),
            "counts": {s.value: sum(x is s for x in statuses) for s in Status}}


def _aggregate(statuses: list[Status]) -> Status:
    if any(s is Status.SOLVABLE for s in statuses):
        return Status.SOLVABLE
    if all(s is Status.UNSOLVABLE for s in statuses):
        return Status.UNSOLVABLE
    return Status.INCONCLUSIVE


def _require_compact(S: SafeSet) -> None:
    ok, worst = S.compactness()
    if not ok:
        raise GeometryError(f"safe set is not compact inside its bounding box (h reaches {worst:.3g} on a face)")


def region_points(S: SafeSet, seed: int = 0, oversample: int = 1, boundary_count: int = 200,
                  extra: np.ndarray | None = None) -> np.ndarray:
    """Search points: complex cell centres, boundary samples, 10 n^2 random interior points."""
    rng = np.random.default_rng(seed)
    K = build_cubical_complex(S)
    parts = [K.cell_centers(), boundary_sample(S, boundary_count * oversample),
             S.sample_interior(10 * S.n ** 2 * oversample, rng)]
    if extra is not None:
        parts.append(np.atleast_2d(extra))
    return np.concatenate(parts)


def _refined_min_residual(sys, S: SafeSet, Zfield: VectorField) -> float | None:
    if not (isinstance(sys, ControlAffineSystem) and isinstance(sys.input_set, FullSpace)):
        return None
    r = 5 * S.resolution
    while (r + 1) ** S.n > REFINE_CAP and r > S.resolution:
        r -= S.resolution // 2 or 1
    P = S.grid_points(r)
    if len(P) == 0:
        return None
    _, res = span_residuals(sys, P, Zfield.batch(P))
    return float(res.min())


def check_theorem3(sys, S: SafeSet, Z: PerturbationField, *, seed: int = 0, oversample: int = 1,
                   boundary_count: int = 200) -> ObstructionVerdict:
    """Non-strict CBF on C: with chi(C) != 0 and dh Z <= 0 on the boundary,
    some (p, u) in C x U must solve F(p, u) = Z_p."""
    _require_compact(S)
    chi = euler_characteristic(build_cubical_complex(S))
    if chi == 0:
        return ObstructionVerdict(Theorem.T3, Outcome.INCONCLUSIVE,
                                  notes=["Euler characteristic zero: theorem silent"])
    Zf = Z.field()
    pts = boundary_sample(S, boundary_count)
    V = Zf.batch(pts)
    G = S.grad(pts)
    dz = np.einsum("ij,ij->i", G, V)
    tol = tangent_tolerance(np.linalg.norm(V, axis=1), np.linalg.norm(G, axis=1))
    if np.any(dz > tol):
        i = int(np.argmax(dz - tol))
        Z.admissible = False
        raise InadmissiblePerturbation(f"dh Z = {dz[i]:.3g} > 0 at a boundary point", pts[i])
    Z.admissible = True
    P = region_points(S, seed, oversample, boundary_count)
    statuses, b, method = region_solvability(sys, S, P, Z, seed=seed)
    stats = _stats(b.residual, b.P, statuses)
    stats["method"] = method
    refined = _refined_min_residual(sys, S, Zf)
    if refined is not None:
        stats["refined_grid_min"] = refined
    agg = _aggregate(statuses)
    v = ObstructionVerdict(Theorem.T3, Outcome.INCONCLUSIVE, residual_statistics=stats, sampled_points=len(P),
                           notes=[f"chi(C) = {chi}", f"perturbation {Z.name}"])
    if agg is Status.UNSOLVABLE:
        v.outcome = Outcome.VIOLATED
        v.witness = {"perturbation": Z.to_dict(), "min_residual": stats["min"]}
    elif agg is Status.SOLVABLE:
        i = statuses.index(Status.SOLVABLE)
        v.outcome = Outcome.NOT_VIOLATED
        v.witness = {"p": b.P[i].tolist(), "u": b.U[i].tolist(), "residual": float(b.residual[i])}
        v.notes.append("a solving pair exists; this does not prove a CBF exists")
    return v


def check_neighborhood_family(sys, S: SafeSet, Zfam: PerturbationField, theorem: Theorem | str, *,
                              ladder=DEFAULT_LADDER, t0: float = 0.05, seed: int = 0, oversample: int = 1,
                              boundary_count: int = 200, confirm: int = 3) -> ObstructionVerdict:
    """Theorems for CBFs on a neighbourhood (T4), strict CBFs (T5) and the
    affine strict case (Cor1), checked along a vanishing family Z_eps.

    Violated iff F(p, u) = Z_eps(p) is Unsolvable over the region at every
    rung of the eps ladder; NotViolated once ``confirm`` consecutive rungs
    are Solvable.
    """
    theorem = Theorem(theorem)
    if theorem not in (Theorem.T4, Theorem.T5, Theorem.COR1):
        raise ValueError(f"family check applies to T4, T5 or Cor1, not {theorem.value}")
    if theorem is Theorem.COR1 and not (isinstance(sys, ControlAffineSystem) and isinstance(sys.input_set, FullSpace)):
        raise ValueError("Cor1 applies to control-affine systems with unconstrained inputs")
    if not Zfam.scale_param:
        raise ValueError(f"perturbation {Zfam.name!r} is not a family (no scale parameter)")
    _require_compact(S)
    chi = euler_characteristic(build_cubical_complex(S))
    if chi == 0:
        return ObstructionVerdict(theorem, Outcome.INCONCLUSIVE, notes=["Euler characteristic zero: theorem silent"])
    notes = [f"chi(C) = {chi}", f"family {Zfam.name}"]
    if theorem is Theorem.T4:
        from .flow import flow_out
        F = flow_out(S, t0, 2 * t0, count=boundary_count)
        region = F.effective
        P = region_points(region, seed, oversample, boundary_count, extra=F.boundary_image)
        region_name = f"flow-out of C with t0={t0}"
        notes.append("neighbourhood V realized as the flow-out set {h + t0 >= 0}")
    else:
        P = region_points(S, seed, oversample, boundary_count)
        region, region_name = S, "C"
    zero = np.abs(Zfam.values(P, 0.0))
    if not np.all(np.isfinite(zero)) or zero.max() > 1e-12:
        raise ValueError(f"family {Zfam.name!r} does not vanish at {Zfam.scale_param} = 0")
    rungs = []
    run_solvable = 0
    outcome = None
    for eps in ladder:
        statuses, b, method = region_solvability(sys, region, P, Zfam, eps, seed=seed)
        agg = _aggregate(statuses)
        st = _stats(b.residual, b.P, statuses)
        rung = {"eps": float(eps), "status": agg.value, "min_residual": st["min"], "max_residual": st["max"],
                "argmin": st["argmin"], "method": method}
        if agg is Status.SOLVABLE:
            i = statuses.index(Status.SOLVABLE)
            rung["solution"] = {"p": b.P[i].tolist(), "u": b.U[i].tolist(), "residual": float(b.residual[i])}
        rungs.append(rung)
        run_solvable = run_solvable + 1 if agg is Status.SOLVABLE else 0
        if run_solvable >= confirm:
            outcome = Outcome.NOT_VIOLATED
            break
    if outcome is None:
        if all(r["status"] == Status.UNSOLVABLE.value for r in rungs):
            outcome = Outcome.VIOLATED
        else:
            outcome = Outcome.INCONCLUSIVE
    v = ObstructionVerdict(theorem, outcome, sampled_points=len(P), epsilon_ladder=rungs, region=region_name,
                           notes=notes)
    res = np.array([r["min_residual"] for r in rungs])
    v.residual_statistics = {"min_over_ladder": float(res.min()), "per_rung_min": res.tolist()}
    if outcome is Outcome.VIOLATED:
        v.witness = {"family": Zfam.to_dict(),
                     "residual_over_eps": [r["min_residual"] / r["eps"] for r in rungs]}
    elif outcome is Outcome.NOT_VIOLATED:
        v.witness = {"solutions": [r.get("solution") for r in rungs[-confirm:]]}
        v.notes.append("solving pairs exist at small eps; this does not prove a CBF exists")
    return v


def _directions(n: int, rng: np.random.Generator) -> np.ndarray:
    axes = []
    for i in range(n):
        for sgn in (1.0, -1.0):
            e = np.zeros(n)
            e[i] = sgn
            axes.append(e)
    extra = max(0, 2 * n * n - len(axes))
    R = rng.normal(size=(extra, n))
    R /= np.linalg.norm(R, axis=1, keepdims=True)
    return np.concatenate([np.array(axes), R]) if extra else np.array(axes)


def brockett_check(sys, xstar, ball_radius: float = 1.0, *, state_radius: float = 0.25, rungs: int = 9,
                   seed: int = 0) -> ObstructionVerdict:
    """Brockett's condition: f(x, u) = z must be solvable for all small z.

    Directions (axes first, 2 n^2 in total) are scaled by ball_radius * 2^-k,
    k < rungs; (x, u) ranges over the box |x - xstar|_inf <= state_radius
    times the input set. Violated iff some direction is Unsolvable at every
    radius.
    """
    xstar = np.asarray(xstar, dtype=float).reshape(-1)
    n = sys.n
    if len(xstar) != n:
        raise ValueError(f"xstar must have {n} components")
    if isinstance(sys.input_set, Sphere) and sys.m > 3:
        raise UnsupportedInputSet("sphere input sets are supported for m <= 3")
    rng = np.random.default_rng(seed)
    notes = []
    eq = _residual_search(sys, xstar[None], np.zeros((1, n)), seed=seed)
    if classify_residual(eq.residual[0], np.zeros(n), True) is not Status.SOLVABLE:
        msg = f"xstar is not an equilibrium for any admissible input (min |f(xstar, u)| = {eq.residual[0]:.3g})"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    D = _directions(n, rng)
    box = np.stack([xstar - state_radius, xstar + state_radius], 1)
    radii = [ball_radius * 2.0 ** -k for k in range(rungs)]
    table = np.empty((len(radii), len(D)), dtype=object)
    resid = np.empty((len(radii), len(D)))
    for k, r in enumerate(radii):
        Z = r * D
        b = _residual_search(sys, np.tile(xstar, (len(D), 1)), Z, state_box=box, seed=seed + k)
        table[k] = _statuses(b, Z)
        resid[k] = b.residual
    persistent = [j for j in range(len(D)) if all(table[k, j] is Status.UNSOLVABLE for k in range(len(radii)))]
    stats = {"per_rung_min": resid.min(axis=1).tolist(),
             "counts_last_rung": {s.value: int(sum(x is s for x in table[-1])) for s in Status}}
    ladder = [{"radius": r, "statuses": [s.value for s in table[k]]} for k, r in enumerate(radii)]
    v = ObstructionVerdict(Theorem.BROCKETT, Outcome.INCONCLUSIVE, residual_statistics=stats,
                           sampled_points=len(D) * len(radii), epsilon_ladder=ladder,
                           region=f"|x - xstar|_inf <= {state_radius}", notes=notes)
    if persistent:
        j = persistent[0]
        v.outcome = Outcome.VIOLATED
        v.witness = {"direction": D[j].tolist(),
                     "residuals": resid[:, j].tolist(),
                     "radii": radii,
                     "residual_over_radius": (resid[:, j] / np.array(radii)).tolist(),
                     "all_directions": [D[i].tolist() for i in persistent]}
    elif all(s is Status.SOLVABLE for s in table[-1]):
        v.outcome = Outcome.NOT_VIOLATED
        v.notes.append("every sampled direction is solvable at the smallest radius")
    return v
