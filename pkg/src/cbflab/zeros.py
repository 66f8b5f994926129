"""Brouwer degree over boxes and certified zeros of vector fields on safe sets."""
from __future__ import annotations

import enum
import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (GeometryError, SafeSet, Summary, boundary_sample, build_cubical_complex,
                       classify_boundary, euler_characteristic)
from .system import VectorField

log = logging.getLogger(__name__)

TOL_ZERO_REL = 1e-8
BOUNDARY_ZERO_REL = 1e-12
ISOLATION_DIAMETER = 1e-6
MAX_REFINEMENTS = 4
# split boxes slightly off-center so symmetric zeros do not land on cuts
_SPLIT = 0.5 + 0.0381966


class DegreeError(ArithmeticError):
    pass


class ZeroOnBoundaryError(DegreeError):
    pass


class PreconditionError(ValueError):
    pass


class Method(str, enum.Enum):
    DEGREE_ISOLATION = "DegreeIsolation"
    PERTURBATION_LIMIT = "PerturbationLimit"
    MINIMIZATION = "Minimization"


@dataclass
class DegreeResult:
    box: np.ndarray
    degree: int
    boundary_min_norm: float
    samples_per_face: int = 0


@dataclass
class ZeroCertificate:
    point: np.ndarray
    residual: float
    method: Method
    box: np.ndarray
    isolated: bool = True

    def to_dict(self) -> dict:
        return {"point": [float(v) for v in self.point], "residual": float(self.residual),
                "method": self.method.value, "box": np.asarray(self.box).tolist(),
                "isolated": self.isolated}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# --------------------------------------------------------------------------
# Degree


def _box_edges_2d(box: np.ndarray, k: int) -> np.ndarray:
    (a, b), (c, d) = box
    t = np.linspace(0.0, 1.0, k + 1)[:-1]
    bottom = np.stack([a + (b - a) * t, np.full_like(t, c)], 1)
    right = np.stack([np.full_like(t, b), c + (d - c) * t], 1)
    top = np.stack([b - (b - a) * t, np.full_like(t, d)], 1)
    left = np.stack([np.full_like(t, a), d - (d - c) * t], 1)
    return np.concatenate([bottom, right, top, left])


def _winding(V: np.ndarray) -> tuple[float, float]:
    W = np.roll(V, -1, axis=0)
    cross = V[:, 0] * W[:, 1] - V[:, 1] * W[:, 0]
    dot = np.einsum("ij,ij->i", V, W)
    dtheta = np.arctan2(cross, dot)
    return float(dtheta.sum() / (2 * math.pi)), float(np.abs(dtheta).max())


def _box_surface_3d(box: np.ndarray, k: int):
    """Vertices and outward-oriented triangles of the box surface."""
    pts, tris = [], []
    offset = 0
    t = np.linspace(0.0, 1.0, k + 1)
    for d, (a, b) in ((0, (1, 2)), (1, (2, 0)), (2, (0, 1))):
        for side, sign in ((1, 1), (0, -1)):
            S, T = np.meshgrid(t, t, indexing="ij")
            P = np.empty((k + 1, k + 1, 3))
            P[..., d] = box[d, side]
            P[..., a] = box[a, 0] + (box[a, 1] - box[a, 0]) * S
            P[..., b] = box[b, 0] + (box[b, 1] - box[b, 0]) * T
            pts.append(P.reshape(-1, 3))
            idx = np.arange((k + 1) ** 2).reshape(k + 1, k + 1) + offset
            v00, v10 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
            v11, v01 = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
            if sign > 0:
                tris += [np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)]
            else:
                tris += [np.stack([v00, v11, v10], 1), np.stack([v00, v01, v11], 1)]
            offset += (k + 1) ** 2
    return np.concatenate(pts), np.concatenate(tris)


def _solid_angle_sum(U: np.ndarray, tris: np.ndarray) -> tuple[float, float]:
    A, B, C = U[tris[:, 0]], U[tris[:, 1]], U[tris[:, 2]]
    num = np.einsum("ij,ij->i", A, np.cross(B, C))
    den = 1 + np.einsum("ij,ij->i", A, B) + np.einsum("ij,ij->i", B, C) + np.einsum("ij,ij->i", C, A)
    omega = 2 * np.arctan2(num, den)
    min_dot = min(np.einsum("ij,ij->i", A, B).min(), np.einsum("ij,ij->i", B, C).min(),
                  np.einsum("ij,ij->i", C, A).min())
    return float(omega.sum() / (4 * math.pi)), float(min_dot)


def topological_degree(X: VectorField, box, samples_per_face: int = 16,
                       scale: float | None = None) -> DegreeResult:
    """Brouwer degree of X over an axis-aligned box from boundary values.

    n=1 uses endpoint signs, n=2 the winding number (angle steps kept below
    pi/2 by refinement), n=3 the signed solid angle swept by X/|X| over a
    triangulated box surface.
    """
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    n = len(box)
    k = int(samples_per_face)
    for attempt in range(MAX_REFINEMENTS + 1):
        if n == 1:
            P = box.reshape(2, 1)
        elif n == 2:
            P = _box_edges_2d(box, k)
        elif n == 3:
            P, tris = _box_surface_3d(box, k)
        else:
            raise DegreeError(f"degree computation supports n <= 3, got n={n}")
        V = X.batch(P)
        if not np.all(np.isfinite(V)):
            raise DegreeError("vector field not finite on box boundary")
        norms = np.linalg.norm(V, axis=1)
        sc = scale if scale is not None else max(float(norms.max()), 1e-300)
        bmin = float(norms.min())
        if bmin <= BOUNDARY_ZERO_REL * sc:
            raise ZeroOnBoundaryError(f"|X| = {bmin:.3g} on the box boundary")
        if n == 1:
            deg = int((np.sign(V[1, 0]) - np.sign(V[0, 0])) / 2)
            return DegreeResult(box, deg, bmin, 1)
        if n == 2:
            w, max_step = _winding(V)
            if max_step < math.pi / 2:
                return DegreeResult(box, int(round(w)), bmin, k)
        else:
            w, min_dot = _solid_angle_sum(V / norms[:, None], tris)
            if min_dot > 0 and abs(w - round(w)) < 0.1:
                return DegreeResult(box, int(round(w)), bmin, k)
        k *= 2
    raise DegreeError(f"boundary sampling did not resolve the field direction after {MAX_REFINEMENTS} refinements")


# --------------------------------------------------------------------------
# Zero location


def _lattice(box: np.ndarray, per_axis: int = 3) -> np.ndarray:
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in box]
    return np.array(list(itertools.product(*axes)))


def _split(box: np.ndarray, axis: int, frac: float = _SPLIT) -> tuple[np.ndarray, np.ndarray]:
    cut = box[axis, 0] + frac * (box[axis, 1] - box[axis, 0])
    a, b = box.copy(), box.copy()
    a[axis, 1] = cut
    b[axis, 0] = cut
    return a, b


def _children(box: np.ndarray) -> list[np.ndarray]:
    out = [box]
    for d in range(len(box)):
        out = [c for b in out for c in _split(b, d)]
    return out


def _diameter(box: np.ndarray) -> float:
    return float(np.linalg.norm(box[:, 1] - box[:, 0]))


def _box_bounds(values: np.ndarray, P: np.ndarray, box: np.ndarray):
    """Lower/upper bounds of a sampled quantity over a box.

    Lipschitz constant from finite differences between neighbouring lattice
    samples with a 2x safety factor; every box point lies within half a
    lattice cell diagonal of some sample.
    """
    n = len(box)
    side = (box[:, 1] - box[:, 0]) / 2
    reach = float(np.linalg.norm(side)) / 2
    L = 0.0
    vals = values.reshape((3,) * n + values.shape[1:])
    for d in range(n):
        diff = np.diff(vals, axis=d)
        mag = np.linalg.norm(diff.reshape(diff.shape[:n] + (-1,)), axis=-1) if values.ndim > 1 else np.abs(diff)
        if side[d] > 0:
            L = max(L, float(mag.max()) / side[d])
    return 2.0 * L * reach


def newton_polish(X: VectorField, p0, tol: float, max_iter: int = 50, box=None):
    """Damped Gauss-Newton on |X|^2 with a finite-difference Jacobian."""
    p = np.asarray(p0, dtype=float).copy()
    v = X(p)
    r = float(np.linalg.norm(v))
    n = len(p)
    for _ in range(max_iter):
        if r <= tol or not np.isfinite(r):
            break
        hstep = 1e-7 * (1.0 + np.abs(p))
        E = np.eye(n) * hstep
        J = (X.batch(p + E) - X.batch(p - E)).T / (2 * hstep)
        step = np.linalg.lstsq(J, -v, rcond=None)[0]
        lam = 1.0
        improved = False
        for _ in range(40):
            q = p + lam * step
            vq = X(q)
            rq = float(np.linalg.norm(vq))
            if np.isfinite(rq) and rq < r:
                p, v, r = q, vq, rq
                improved = True
                break
            lam /= 2
        if not improved:
            break
    return p, r


def _domain_scale(X: VectorField, S: SafeSet) -> float:
    P = S.grid_points(max(8, S.resolution // 4))
    if len(P) == 0:
        P = np.array([S.bbox.mean(axis=1)])
    V = X.batch(P)
    norms = np.linalg.norm(V, axis=1)
    norms = norms[np.isfinite(norms)]
    return float(norms.max()) if len(norms) else 1.0


def _isolate(X: VectorField, box: np.ndarray, deg: int, scale: float, target: float) -> np.ndarray | None:
    """Bisect a nonzero-degree box down to diameter <= target."""
    inflations = 0
    while _diameter(box) > target:
        axis = int(np.argmax(box[:, 1] - box[:, 0]))
        chosen = None
        for frac in (_SPLIT, 0.5 - 0.0213, 0.5 + 0.1132):
            try:
                kids = _split(box, axis, frac)
                degs = [topological_degree(X, kb, 8, scale=scale).degree for kb in kids]
            except DegreeError:
                # zero on or too close to the cut: try another split
                continue
            for kb, kd in zip(kids, degs):
                if kd != 0:
                    chosen = (kb, kd)
                    break
            if chosen is not None:
                break
        if chosen is None:
            # every cut leaves the zero next to a kept edge: move the edges
            inflations += 1
            deg, grown = _leaf_degree(X, box, scale, first=1)
            if deg == 0 or inflations > 20:
                return None
            box = grown
            continue
        box, deg = chosen
    return box


def _leaf_degree(X: VectorField, box: np.ndarray, scale: float, first: int = 0) -> tuple[int, np.ndarray]:
    """Degree of a leaf box; when a zero sits on or near its boundary the box
    is inflated asymmetrically until the degree resolves (0 if it never does)."""
    width = box[:, 1] - box[:, 0]
    for grow in (0.0, 0.0137, 0.0419, 0.1031)[first:]:
        trial = box + np.stack([-grow * width, 1.31 * grow * width], 1)
        try:
            return topological_degree(X, trial, 8, scale=scale).degree, trial
        except DegreeError:
            continue
    return 0, box


def locate_zeros(X: VectorField, S: SafeSet, *, leaf_levels: int = 6, max_boxes: int = 20000,
                 max_zeros: int = 64) -> list[ZeroCertificate]:
    """Certified zeros of X inside C.

    Boxes are recursively subdivided; a box is discarded when sampled bounds
    exclude either a zero of X or an intersection with C. Leaf boxes with
    nonzero degree are bisected to diameter 1e-6 and their centre polished by
    Gauss-Newton to |X| <= 1e-8 * scale (scale = max |X| on a grid of C).
    For n >= 4 a multi-start minimization fallback is used (no degree).
    """
    n = S.n
    scale = _domain_scale(X, S)
    tol = TOL_ZERO_REL * scale
    if n >= 4:
        return _minimization_fallback(X, S, tol)
    root = S.bbox.copy()
    leaf_diam = _diameter(root) / 2 ** leaf_levels
    stack = [root]
    leaves = []
    processed = 0
    while stack:
        box = stack.pop()
        processed += 1
        if processed > max_boxes:
            log.warning("locate_zeros: box budget exhausted")
            break
        P = _lattice(box)
        hv = S.value(P)
        if np.all(np.isfinite(hv)) and hv.max() + _box_bounds(hv, P, box) < 0:
            continue
        V = X.batch(P)
        norms = np.linalg.norm(V, axis=1)
        if np.all(np.isfinite(V)) and norms.min() > _box_bounds(V, P, box):
            continue
        if _diameter(box) <= leaf_diam:
            leaves.append(box)
        else:
            stack.extend(_children(box))
    certs: list[ZeroCertificate] = []
    for box in leaves:
        deg, box = _leaf_degree(X, box, scale)
        if deg == 0:
            continue
        small = _isolate(X, box, deg, scale, ISOLATION_DIAMETER)
        if small is None:
            continue
        # polish past the acceptance tolerance; Newton stops once it stalls
        p, r = newton_polish(X, small.mean(axis=1), 1e-6 * tol)
        if r <= tol and float(S.value(p)) >= -1e-9:
            if not any(np.linalg.norm(p - c.point) < 1e-7 for c in certs):
                certs.append(ZeroCertificate(p, r, Method.DEGREE_ISOLATION, small))
        if len(certs) >= max_zeros:
            break
    if len(certs) >= max_zeros or len(leaves) > 50 * max(1, len(certs)) * 3 ** n:
        for c in certs:
            c.isolated = False
    return certs


def _minimization_fallback(X: VectorField, S: SafeSet, tol: float, starts: int = 64,
                           seed: int = 0) -> list[ZeroCertificate]:
    rng = np.random.default_rng(seed)
    P = S.sample_interior(starts, rng)
    certs = []
    for p0 in P:
        p, r = newton_polish(X, p0, tol, max_iter=100)
        if r <= tol and S.value(p) >= -1e-9 and not any(np.linalg.norm(p - c.point) < 1e-7 for c in certs):
            certs.append(ZeroCertificate(p, r, Method.MINIMIZATION, np.stack([p, p], 1), isolated=False))
    return certs


# --------------------------------------------------------------------------
# Perturbation sequence and the full pipeline


@dataclass
class PerturbationSequence:
    deltas: list
    certificates: list
    increments: list
    limit: np.ndarray | None
    limit_residual: float
    polished: ZeroCertificate | None


def default_deltas() -> list[float]:
    return [2.0 ** -k for k in range(1, 7)]


def perturbation_sequence_zero(X: VectorField, Y: VectorField, S: SafeSet,
                               deltas=None, boundary_count: int = 200) -> PerturbationSequence:
    """Zeros of X + delta*Y along a decreasing delta sequence and their limit.

    Y must point inward on the boundary, and so must every X + delta*Y.
    """
    deltas = list(deltas) if deltas is not None else default_deltas()
    if any(d <= 0 for d in deltas) or any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise PreconditionError("deltas must be positive and strictly decreasing")
    pts = boundary_sample(S, boundary_count)
    if classify_boundary(S, Y, pts).summary is not Summary.ALL_INWARD:
        raise PreconditionError("perturbation direction Y is not inward-pointing on the boundary")
    certs, prev = [], None
    for d in deltas:
        Xd = X + Y * d
        if classify_boundary(S, Xd, pts).summary is not Summary.ALL_INWARD:
            raise PreconditionError(f"X + {d}*Y is not inward-pointing on the boundary")
        found = locate_zeros(Xd, S)
        if not found:
            raise GeometryError(f"no zero located for X + {d}*Y although it points inward")
        ref = prev if prev is not None else S.bbox.mean(axis=1)
        best = min(found, key=lambda c: float(np.linalg.norm(c.point - ref)))
        certs.append(best)
        prev = best.point
    increments = [float(np.linalg.norm(b.point - a.point)) for a, b in zip(certs, certs[1:])]
    limit = certs[-1].point
    limit_res = float(np.linalg.norm(X(limit)))
    tol = TOL_ZERO_REL * _domain_scale(X, S)
    p, r = newton_polish(X, limit, tol)
    polished = None
    if r <= tol:
        polished = ZeroCertificate(p, r, Method.PERTURBATION_LIMIT, certs[-1].box)
    return PerturbationSequence(deltas, certs, increments, limit, limit_res, polished)


@dataclass
class PoincareHopfReport:
    euler_characteristic: int
    summary: Summary
    branch: str
    certificates: list = field(default_factory=list)
    sequence: PerturbationSequence | None = None
    theorem_contradiction: bool = False
    notes: list = field(default_factory=list)

    @property
    def zero_found(self) -> bool:
        return bool(self.certificates)


def inward_gradient_field(S: SafeSet) -> VectorField:
    """grad h / (1 + |grad h|): inward-pointing wherever grad h != 0 on the boundary."""
    def batch(P):
        G = S.grad(P)
        return G / (1.0 + np.linalg.norm(G, axis=1, keepdims=True))
    return VectorField(None, S.n, batch, name="grad h/(1+|grad h|)")


def verify_poincare_hopf(X: VectorField, S: SafeSet, boundary_count: int = 200) -> PoincareHopfReport:
    """Euler characteristic, boundary behaviour, then zero search when implied."""
    ok, _ = S.compactness()
    if not ok:
        raise GeometryError("safe set is not compact inside its bounding box")
    chi = euler_characteristic(build_cubical_complex(S))
    pts = boundary_sample(S, boundary_count)
    summary = classify_boundary(S, X, pts).summary
    rep = PoincareHopfReport(chi, summary, "none")
    if chi == 0:
        rep.notes.append("Euler characteristic is zero: no zero is implied")
        rep.certificates = locate_zeros(X, S)
        return rep
    if summary is Summary.SOME_OUTWARD:
        rep.notes.append("field points outward somewhere on the boundary: hypotheses fail")
        return rep
    if summary is Summary.ALL_INWARD:
        rep.branch = "direct"
        rep.certificates = locate_zeros(X, S)
    else:
        rep.branch = "perturbation"
        seq = perturbation_sequence_zero(X, inward_gradient_field(S), S, boundary_count=boundary_count)
        rep.sequence = seq
        if seq.polished is not None:
            rep.certificates = [seq.polished]
        else:
            rep.certificates = locate_zeros(X, S)
    if not rep.certificates:
        rep.theorem_contradiction = True
        rep.notes.append("NUMERICAL FAILURE: hypotheses hold but no zero was certified")
        log.error("Poincare-Hopf pipeline found no zero although the hypotheses hold")
    return rep
