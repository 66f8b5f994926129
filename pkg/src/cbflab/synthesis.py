"""Safe controller construction: the pointwise minimum-norm QP safety filter
and a smooth controller blended from constant inputs over a ball cover.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dsl import Expression, lambdify, parse_expr
from .geometry import SafeSet, boundary_sample
from .system import (Ball, Box, ControlAffineSystem, Controller, FinitePoints, FullSpace, Sphere,
                     TabulatedController)

log = logging.getLogger(__name__)

MARGIN = 1e-3
RADIUS_CAP_CELLS = 4
PATCH_SAMPLES = 50
VERIFY_SAMPLES = 10_000
T0_VERIFY = 0.05
FULLSPACE_INPUT_BOUND = 1.0


class SynthesisError(RuntimeError):
    pass


class InfeasibleConstraint(SynthesisError):
    def __init__(self, p, gap: float):
        self.p = np.asarray(p)
        self.gap = gap
        super().__init__(f"safety constraint infeasible at {self.p.tolist()} (gap {gap:.3g})")


class DegenerateConstraint(SynthesisError):
    def __init__(self, p):
        self.p = np.asarray(p)
        super().__init__(f"active constraint with G^T grad h = 0 at {self.p.tolist()}")


class StrictnessError(SynthesisError):
    def __init__(self, message: str, witness, slack: float):
        self.witness = np.asarray(witness)
        self.slack = slack
        super().__init__(message)


class CoverageError(SynthesisError):
    def __init__(self, message: str, witness):
        self.witness = np.asarray(witness)
        super().__init__(message)


# --------------------------------------------------------------------------
# Alpha functions


class AlphaFunction:
    """An extended class-K_inf function alpha: strictly increasing, alpha(0) = 0."""

    def __init__(self, kind: str, c: float = 1.0, expr: Expression | str | None = None):
        self.kind = kind
        self.c = float(c)
        if kind in ("linear", "cubic"):
            if not self.c > 0:
                raise ValueError("alpha coefficient must be positive")
            self.expr = parse_expr(f"{self.c!r} * r" if kind == "linear" else f"{self.c!r} * r^3")
        elif kind == "expression":
            self.expr = parse_expr(expr) if isinstance(expr, str) else expr
            extra = self.expr.free_vars() - {"r"}
            if extra:
                raise ValueError(f"alpha may only use the variable r, found {sorted(extra)}")
        else:
            raise ValueError(f"unknown alpha kind {kind!r}")
        self._fn = lambdify([self.expr], ["r"])
        self.validate()

    @classmethod
    def linear(cls, c: float = 1.0) -> "AlphaFunction":
        return cls("linear", c)

    @classmethod
    def cubic(cls, c: float = 1.0) -> "AlphaFunction":
        return cls("cubic", c)

    @classmethod
    def user(cls, expr: Expression | str) -> "AlphaFunction":
        return cls("expression", expr=expr)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        out = np.broadcast_to(np.asarray(self._fn(r)[0], dtype=float), r.shape)
        return float(out) if out.ndim == 0 else out.copy()

    def validate(self) -> None:
        if self(0.0) != 0.0:
            raise ValueError(f"alpha(0) = {self(0.0)!r}, must be 0")
        grid = np.linspace(-10, 10, 1000)
        v = self(grid)
        if not np.all(np.isfinite(v)) or not np.all(np.diff(v) > 0):
            raise ValueError("alpha is not strictly increasing on [-10, 10]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "c": self.c, "expr": str(self.expr)}

    def __repr__(self) -> str:
        return f"AlphaFunction({self.expr})"


# --------------------------------------------------------------------------
# Constraint data: slack(p, u) = c(p) + a(p) . u


def constraint_terms(sys: ControlAffineSystem, S: SafeSet, alpha: AlphaFunction, P):
    """c = dh X0 + alpha(h) and a = G^T grad h at rows of P."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    d, G = sys.drift_and_matrix(P)
    g = S.grad(P)
    c = np.einsum("ij,ij->i", g, d) + alpha(S.value(P))
    a = np.einsum("knm,kn->km", G, g)
    return c, a


def _box_projection(nom, a, b, lo, hi):
    """argmin |u - nom| over the box with a.u >= b, by breakpoint search."""
    u0 = np.clip(nom, lo, hi)
    if a @ u0 >= b:
        return u0, True
    best = np.where(a > 0, hi, np.where(a < 0, lo, u0))
    if a @ best < b:
        return best, False
    with np.errstate(divide="ignore", invalid="ignore"):
        br = np.concatenate([(lo - nom) / a, (hi - nom) / a])
    br = np.unique(br[np.isfinite(br) & (br > 0)])
    prev, gprev = 0.0, a @ u0
    for lam in br:
        g = a @ np.clip(nom + lam * a, lo, hi)
        if g >= b:
            lam_star = prev + (b - gprev) * (lam - prev) / (g - gprev)
            return np.clip(nom + lam_star * a, lo, hi), True
        prev, gprev = lam, g
    return best, True


class QPFilter(TabulatedController):
    """min |u - nominal(p)|^2 subject to dh F(p, u) >= -alpha(h(p)), u in U."""

    def __init__(self, sys: ControlAffineSystem, S: SafeSet, alpha: AlphaFunction, nominal: Controller):
        if not isinstance(sys.input_set, (FullSpace, Box)):
            raise ValueError("QP filter supports FullSpace and Box input sets")
        if nominal.m != sys.m:
            raise ValueError("nominal controller has the wrong input dimension")
        self.sys, self.S, self.alpha, self.nominal = sys, S, alpha, nominal
        super().__init__(lambda p: self.batch(p[None])[0], sys.m, name="qp_filter")

    def batch(self, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        nom = self.nominal.batch(P)
        c, a = constraint_terms(self.sys, self.S, self.alpha, P)
        gap = -(c + np.einsum("ij,ij->i", a, nom))
        aa = np.einsum("ij,ij->i", a, a)
        active = gap > 0
        if isinstance(self.sys.input_set, FullSpace):
            bad = active & (aa == 0)
            if bad.any():
                raise DegenerateConstraint(P[np.flatnonzero(bad)[0]])
            lam = np.where(active, gap / np.where(aa > 0, aa, 1.0), 0.0)
            return nom + lam[:, None] * a
        lo, hi = np.array(self.sys.input_set.lower), np.array(self.sys.input_set.upper)
        out = np.clip(nom, lo, hi)
        for i in np.flatnonzero((c + np.einsum("ij,ij->i", a, out)) < 0):
            if aa[i] == 0:
                raise DegenerateConstraint(P[i])
            u, ok = _box_projection(nom[i], a[i], -c[i], lo, hi)
            if not ok:
                raise InfeasibleConstraint(P[i], float(-c[i] - a[i] @ u))
            out[i] = u
        return out


def qp_filter(sys: ControlAffineSystem, S: SafeSet, alpha: AlphaFunction, nominal: Controller) -> QPFilter:
    return QPFilter(sys, S, alpha, nominal)


# --------------------------------------------------------------------------
# Greedy cover and blending


def best_inputs(sys: ControlAffineSystem, a: np.ndarray) -> np.ndarray:
    """Rows u maximizing a.u over the input set (FullSpace bounded by |u| <= 1)."""
    s = sys.input_set
    norm = np.linalg.norm(a, axis=1, keepdims=True)
    unit = np.where(norm > 0, a / np.where(norm > 0, norm, 1.0), 0.0)
    if isinstance(s, FullSpace):
        return FULLSPACE_INPUT_BOUND * unit
    if isinstance(s, Ball):
        return s.radius * unit
    if isinstance(s, Sphere):
        e1 = np.zeros(s.m)
        e1[0] = 1.0
        return s.radius * np.where(norm > 0, unit, e1)
    if isinstance(s, Box):
        lo, hi = np.array(s.lower), np.array(s.upper)
        return np.where(a > 0, hi, np.where(a < 0, lo, (lo + hi) / 2))
    if isinstance(s, FinitePoints):
        pts = s.array
        return pts[np.argmax(a @ pts.T, axis=1)]
    raise TypeError(f"unsupported input set {s!r}")


def slack(sys: ControlAffineSystem, S: SafeSet, alpha: AlphaFunction, P, U) -> np.ndarray:
    """dh F(p, u) + alpha(h(p)) row by row."""
    c, a = constraint_terms(sys, S, alpha, P)
    return c + np.einsum("ij,ij->i", a, np.broadcast_to(U, a.shape))


@dataclass
class Patch:
    center: np.ndarray
    radius: float
    input: np.ndarray
    margin: float

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "radius": self.radius, "input": self.input.tolist(),
                "margin": self.margin}


def _ball_samples(center, radius, count, rng) -> np.ndarray:
    n = len(center)
    D = rng.normal(size=(count, n))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    return center + radius * rng.uniform(size=(count, 1)) ** (1 / n) * D


def _scaled_distances(P, centers, radii) -> np.ndarray:
    return np.linalg.norm(P[:, None, :] - centers[None], axis=-1) / radii[None]


def _covered(P, centers, radii, chunk: int = 4096) -> np.ndarray:
    out = np.zeros(len(P), dtype=bool)
    if len(centers) == 0:
        return out
    for i in range(0, len(P), chunk):
        out[i:i + chunk] = (_scaled_distances(P[i:i + chunk], centers, radii) < 1).any(axis=1)
    return out


def build_local_cover(sys: ControlAffineSystem, S: SafeSet, alpha: AlphaFunction, *, t0: float = T0_VERIFY,
                      margin: float = MARGIN, seed: int = 0, refine_samples: int = 20_000,
                      boundary_count: int = 200, max_patches: int = 20_000) -> list[Patch]:
    """Greedy ball cover of C~ = {h + t0 >= 0} by patches with constant inputs.

    Strictness (margin >= m0 for the margin-maximizing input) is checked on
    boundary samples of C first, then on grid points of C~. Uncovered grid
    points, visited in raster order, become patch centres; each radius is the
    largest (bisection, capped at 4 grid cells) keeping slack >= m0/2 at 50
    sampled points of the patch inside C~. A final pass adds patches at
    uncovered random samples of C~.
    """
    if not isinstance(sys, ControlAffineSystem):
        raise TypeError("cover construction needs a control-affine system")
    rng = np.random.default_rng(seed)
    region = S.shifted(t0)

    def strict_at(P, where):
        c, a = constraint_terms(sys, S, alpha, P)
        U = best_inputs(sys, a)
        m = c + np.einsum("ij,ij->i", a, U)
        bad = ~(m >= margin)
        if bad.any():
            i = int(np.flatnonzero(bad)[np.argmin(m[bad])]) if np.isfinite(m[bad]).all() else int(np.flatnonzero(bad)[0])
            raise StrictnessError(f"no input achieves margin {margin:g} at a {where} point "
                                  f"{P[i].tolist()} (best slack {m[i]:.3g}); h is not a strict CBF here",
                                  P[i], float(m[i]))
        return U, m

    strict_at(boundary_sample(S, boundary_count), "boundary")
    grid = region.grid_points()
    U_grid, m_grid = strict_at(grid, "grid")
    cap = RADIUS_CAP_CELLS * float(S.spacing().max())

    def radius_ok(q, u, r):
        P = _ball_samples(q, r, PATCH_SAMPLES, rng)
        P = P[region.contains(P)]
        if len(P) == 0:
            return True
        return bool(np.all(slack(sys, S, alpha, P, u) >= margin / 2))

    def make_patch(q, u, m):
        if radius_ok(q, u, cap):
            return Patch(q, cap, u, float(m))
        lo, hi = 0.0, cap
        for _ in range(12):
            mid = (lo + hi) / 2
            if radius_ok(q, u, mid):
                lo = mid
            else:
                hi = mid
        return Patch(q, max(lo, cap * 2.0 ** -12), u, float(m))

    patches: list[Patch] = []
    centers = np.zeros((0, S.n))
    radii = np.zeros(0)
    covered = np.zeros(len(grid), dtype=bool)
    for i in range(len(grid)):
        if covered[i]:
            continue
        p = make_patch(grid[i], U_grid[i], m_grid[i])
        patches.append(p)
        covered |= np.linalg.norm(grid - p.center, axis=1) < p.radius
        covered[i] = True
        if len(patches) > max_patches:
            raise SynthesisError(f"cover needs more than {max_patches} patches")
    centers = np.array([p.center for p in patches])
    radii = np.array([p.radius for p in patches])
    extra = np.concatenate([region.sample_interior(refine_samples, rng), boundary_sample(region, boundary_count)])
    for _ in range(10):
        holes = extra[~_covered(extra, centers, radii)]
        if len(holes) == 0:
            break
        U_h, m_h = strict_at(holes, "sample")
        added = np.zeros(len(holes), dtype=bool)
        for j in range(len(holes)):
            if added[j]:
                continue
            p = make_patch(holes[j], U_h[j], m_h[j])
            patches.append(p)
            added |= np.linalg.norm(holes - p.center, axis=1) < p.radius
            added[j] = True
        centers = np.array([p.center for p in patches])
        radii = np.array([p.radius for p in patches])
    log.info("cover: %d patches over %d grid points", len(patches), len(grid))
    return patches


BUMP_PROFILE = "exp(-1/(1-s^2)) for s < 1, 0 otherwise"


class BlendedController(Controller):
    """kappa(p) = sum_j psi_j(p) u_j with psi_j normalized bump weights.

    Outside the covered region the nearest patch's input is held, faded by a
    smooth cutoff in the scaled distance; this extension is not used by any
    check.
    """

    def __init__(self, centers, radii, inputs):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.radii = np.asarray(radii, dtype=float).reshape(-1)
        self.inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        if not (len(self.centers) == len(self.radii) == len(self.inputs)) or len(self.radii) == 0:
            raise ValueError("patch arrays must be non-empty and of equal length")
        if np.any(self.radii <= 0):
            raise ValueError("patch radii must be positive")
        self.m = self.inputs.shape[1]
        self.n = self.centers.shape[1]

    @classmethod
    def from_patches(cls, patches: list[Patch]) -> "BlendedController":
        return cls([p.center for p in patches], [p.radius for p in patches], [p.input for p in patches])

    def weights(self, P, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
        """Normalized weights (N, J) and a covered mask; uncovered rows are zero."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        W = np.zeros((len(P), len(self.radii)))
        cov = np.zeros(len(P), dtype=bool)
        for i in range(0, len(P), chunk):
            s = _scaled_distances(P[i:i + chunk], self.centers, self.radii)
            inside = s < 1
            with np.errstate(divide="ignore"):
                logpsi = np.where(inside, -1.0 / (1.0 - np.where(inside, s, 0.0) ** 2), -np.inf)
            c = inside.any(axis=1)
            norm = np.where(c, logsumexp(np.where(c[:, None], logpsi, 0.0), axis=1), 0.0)
            W[i:i + chunk] = np.where(c[:, None], np.exp(logpsi - norm[:, None]), 0.0)
            cov[i:i + chunk] = c
        return W, cov

    def batch(self, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        W, cov = self.weights(P)
        out = W @ self.inputs
        if not cov.all():
            Q = P[~cov]
            s = _scaled_distances(Q, self.centers, self.radii)
            j = np.argmin(s, axis=1)
            d = np.minimum(s[np.arange(len(Q)), j] - 1.0, 1.0 - 1e-12)
            fade = np.exp(1.0 - 1.0 / (1.0 - d ** 2))
            out[~cov] = self.inputs[j] * fade[:, None]
        return out

    def __call__(self, p) -> np.ndarray:
        return self.batch(np.asarray(p, dtype=float)[None])[0]

    def to_dict(self) -> dict:
        return {"patches": [{"center": c.tolist(), "radius": float(r), "input": u.tolist()}
                            for c, r, u in zip(self.centers, self.radii, self.inputs)],
                "profile": BUMP_PROFILE, "normalization": "weights divided by their sum"}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "BlendedController":
        ps = d["patches"]
        return cls([p["center"] for p in ps], [p["radius"] for p in ps], [p["input"] for p in ps])

    @classmethod
    def from_json(cls, text: str) -> "BlendedController":
        return cls.from_dict(json.loads(text))


def blend(patches: list[Patch]) -> BlendedController:
    return BlendedController.from_patches(patches)


@dataclass
class StrictReport:
    min_slack: float
    samples: int
    witness: np.ndarray
    holes: int
    hole_witness: np.ndarray | None = None
    max_weight_error: float | None = None
    min_weight: float | None = None
    blend_bound_gap: float | None = None
    region: str = ""
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.holes == 0 and self.min_slack > 0

    def raise_for_failure(self) -> None:
        if self.holes:
            raise CoverageError(f"{self.holes} sampled points are not covered by any patch", self.hole_witness)
        if not self.min_slack > 0:
            raise StrictnessError(f"strict inequality fails (slack {self.min_slack:.3g})", self.witness,
                                  self.min_slack)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "min_slack": self.min_slack, "samples": self.samples,
                "witness": self.witness.tolist(), "holes": self.holes,
                "max_weight_error": self.max_weight_error, "min_weight": self.min_weight,
                "blend_bound_gap": self.blend_bound_gap, "region": self.region, "notes": self.notes}


def verify_strict(sys: ControlAffineSystem, S: SafeSet, alpha: AlphaFunction, controller: Controller, *,
                  t0: float = T0_VERIFY, samples: int = VERIFY_SAMPLES, seed: int = 0,
                  boundary_count: int = 200) -> StrictReport:
    """Sample C~ = {h + t0 >= 0} and check dh F(p, kappa(p)) + alpha(h(p)) > 0.

    For blended controllers the partition of unity and the convex-combination
    bound (blend slack >= worst active patch slack) are checked as well.
    """
    rng = np.random.default_rng(seed)
    region = S.shifted(t0) if t0 > 0 else S
    parts = [region.sample_interior(samples, rng), boundary_sample(S, boundary_count)]
    if t0 > 0:
        parts.append(boundary_sample(region, boundary_count))
    P = np.concatenate(parts)
    U = controller.batch(P)
    sl = slack(sys, S, alpha, P, U)
    i = int(np.argmin(sl))
    rep = StrictReport(float(sl[i]), len(P), P[i], 0, region=f"h + {t0} >= 0")
    if isinstance(controller, BlendedController):
        W, cov = controller.weights(P)
        rep.holes = int((~cov).sum())
        if rep.holes:
            rep.hole_witness = P[np.flatnonzero(~cov)[0]]
        Wc = W[cov]
        rep.max_weight_error = float(np.max(np.abs(Wc.sum(axis=1) - 1.0))) if len(Wc) else None
        rep.min_weight = float(Wc.min()) if len(Wc) else None
        c, a = constraint_terms(sys, S, alpha, P[cov])
        patch_slack = c[:, None] + a @ controller.inputs.T
        worst = np.min(np.where(Wc > 0, patch_slack, np.inf), axis=1)
        rep.blend_bound_gap = float(np.min(sl[cov] - worst)) if len(Wc) else None
    return rep
