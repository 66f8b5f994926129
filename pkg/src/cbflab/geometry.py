"""Safe sets C = {h >= 0}, cubical complexes and Euler characteristics,
zero-set sampling and boundary classification of vector fields."""
from __future__ import annotations

import csv
import enum
import io
import itertools
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .dsl import Expression, differentiate, lambdify, parse_expr
from .system import VectorField, state_names

log = logging.getLogger(__name__)

EPS_REG = 1e-4
ETA = 1e-12
H_TOL = 1e-10


class GeometryError(RuntimeError):
    pass


class DegenerateSetError(GeometryError):
    """The zero level set of h is empty inside the bounding box."""


class ResolutionError(GeometryError):
    """Euler characteristic changed under resolution doubling."""


class SamplingError(GeometryError):
    pass


@dataclass
class SafeSet:
    """C = {x in bbox : h(x) >= 0}.

    ``bbox`` is an ``(n, 2)`` array of per-axis ``[lo, hi]`` and ``resolution``
    the number of grid cells per axis.
    """

    h: Expression
    bbox: np.ndarray
    resolution: int = 64
    name: str = ""

    def __post_init__(self):
        if isinstance(self.h, str):
            self.h = parse_expr(self.h)
        self.bbox = np.asarray(self.bbox, dtype=float).reshape(-1, 2)
        if np.any(self.bbox[:, 0] >= self.bbox[:, 1]):
            raise ValueError("bbox must have lo < hi on every axis")
        self.n = len(self.bbox)
        names = state_names(self.n)
        extra = self.h.free_vars() - set(names)
        if extra:
            raise ValueError(f"h references unknown variables {sorted(extra)}")
        if self.h.contains("abs"):
            warnings.warn("h contains abs(); its derivative uses sign() with sign(0) = 0, "
                          "so h may fail to be smooth", stacklevel=2)
        self.grad_exprs = [differentiate(self.h, v) for v in names]
        self._h_fn = lambdify([self.h], names)
        self._g_fn = lambdify(self.grad_exprs, names)
        self._cache: dict = {}

    # evaluation ------------------------------------------------------------
    def value(self, P) -> np.ndarray | float:
        P = np.asarray(P, dtype=float)
        if P.ndim == 1:
            return float(self._h_fn(*P)[0])
        return np.broadcast_to(np.asarray(self._h_fn(*P.T)[0], dtype=float), (len(P),)).copy()

    def grad(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        if P.ndim == 1:
            return np.array(self._g_fn(*P), dtype=float)
        return np.stack([np.broadcast_to(np.asarray(g, dtype=float), (len(P),)) for g in self._g_fn(*P.T)], axis=-1)

    def dh(self, P, V) -> np.ndarray:
        """Directional derivative dh_p V_p for rows of ``P`` and ``V``."""
        return np.einsum("ij,ij->i", self.grad(np.atleast_2d(P)), np.atleast_2d(V))

    def contains(self, P) -> np.ndarray:
        P = np.atleast_2d(P)
        inside = np.all((P >= self.bbox[:, 0]) & (P <= self.bbox[:, 1]), axis=1)
        return inside & (self.value(P) >= 0)

    def shifted(self, offset: float, name: str = "") -> "SafeSet":
        """The set {h + offset >= 0} on the same box and grid."""
        return SafeSet(self.h + float(offset), self.bbox, self.resolution, name or f"{self.name}+{offset}")

    # grids -------------------------------------------------------------------
    def axes(self, resolution: int | None = None) -> list[np.ndarray]:
        r = resolution or self.resolution
        return [np.linspace(lo, hi, r + 1) for lo, hi in self.bbox]

    def vertex_values(self, resolution: int | None = None) -> np.ndarray:
        """h on the (r+1)^n vertex grid, exact zeros lifted by ETA."""
        r = resolution or self.resolution
        key = ("vertex", r)
        if key not in self._cache:
            mesh = np.meshgrid(*self.axes(r), indexing="ij")
            H = np.broadcast_to(np.asarray(self._h_fn(*mesh)[0], dtype=float), mesh[0].shape).copy()
            H[H == 0] += ETA
            self._cache[key] = H
        return self._cache[key]

    def spacing(self, resolution: int | None = None) -> np.ndarray:
        r = resolution or self.resolution
        return (self.bbox[:, 1] - self.bbox[:, 0]) / r

    def grid_points(self, resolution: int | None = None) -> np.ndarray:
        """Grid vertices lying in C, in raster order."""
        r = resolution or self.resolution
        mesh = np.meshgrid(*self.axes(r), indexing="ij")
        P = np.stack([m.ravel() for m in mesh], axis=1)
        return P[self.vertex_values(r).ravel() >= 0]

    def compactness(self) -> tuple[bool, float]:
        """Check that h < 0 on every face of the bounding box.

        Returns ``(ok, max h over the sampled faces)``.
        """
        H = self.vertex_values()
        worst = -np.inf
        for d in range(self.n):
            for idx in (0, -1):
                worst = max(worst, float(np.take(H, idx, axis=d).max()))
        return worst < 0, worst

    def sample_interior(self, count: int, rng: np.random.Generator, max_tries: int = 200) -> np.ndarray:
        """Uniform rejection samples of C."""
        out = []
        got = 0
        lo, hi = self.bbox[:, 0], self.bbox[:, 1]
        for _ in range(max_tries):
            P = rng.uniform(lo, hi, size=(max(4 * count, 64), self.n))
            P = P[self.value(P) >= 0]
            out.append(P)
            got += len(P)
            if got >= count:
                break
        P = np.concatenate(out)[:count] if out else np.zeros((0, self.n))
        if len(P) < count:
            raise SamplingError(f"only {len(P)} of {count} interior samples found")
        return P


# --------------------------------------------------------------------------
# Cubical complexes


def _shift(mask: np.ndarray, offsets: Sequence[int]) -> np.ndarray:
    """out[j] = mask[j - offsets] with zero fill (offsets are 0 or 1)."""
    out = np.zeros_like(mask)
    src = tuple(slice(0, s - o) for s, o in zip(mask.shape, offsets))
    dst = tuple(slice(o, s) for s, o in zip(mask.shape, offsets))
    out[dst] = mask[src]
    return out


def _closure_counts(generators: dict[tuple, np.ndarray], n: int) -> dict[tuple, np.ndarray]:
    """Close a set of generating cells under faces.

    Cells are indexed by their lowest vertex on the (r+1)^n vertex grid and a
    type, the tuple of axes they span. ``generators`` maps a type to a
    boolean vertex-grid mask. Returns the closed masks for every type.
    """
    closed = {}
    for k in range(n + 1):
        for sub in itertools.combinations(range(n), k):
            acc = None
            for gtype, gmask in generators.items():
                if not set(sub) <= set(gtype):
                    continue
                free = [d for d in gtype if d not in sub]
                for bits in itertools.product((0, 1), repeat=len(free)):
                    offs = [0] * n
                    for d, b in zip(free, bits):
                        offs[d] = b
                    shifted = _shift(gmask, offs)
                    acc = shifted if acc is None else (acc | shifted)
            if acc is not None:
                closed[sub] = acc
    return closed


@dataclass
class CubicalComplex:
    """Closed cubical complex on a regular grid.

    ``masks[type]`` flags the cells of the given type (tuple of spanned axes)
    by lowest vertex; ``counts[k]`` is the number of k-cells.
    """

    n: int
    resolution: int
    axes: list
    masks: dict
    counts: list
    top_cells: np.ndarray | None = None
    clipped: bool = False
    notes: list = field(default_factory=list)

    @classmethod
    def from_generators(cls, generators: dict, n: int, resolution: int, axes, **kw) -> "CubicalComplex":
        masks = _closure_counts(generators, n)
        counts = [0] * (n + 1)
        for t, mask in masks.items():
            counts[len(t)] += int(mask.sum())
        return cls(n, resolution, axes, masks, counts, **kw)

    @property
    def euler_characteristic(self) -> int:
        return euler_characteristic(self)

    def cell_centers(self) -> np.ndarray:
        """Centers of the included top-dimensional cells."""
        full = tuple(range(self.n))
        mask = self.masks.get(full)
        if mask is None:
            return np.zeros((0, self.n))
        idx = np.argwhere(mask)
        h = np.array([a[1] - a[0] for a in self.axes])
        lo = np.array([a[0] for a in self.axes])
        return lo + (idx + 0.5) * h

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["dimension", "cells"])
        for k, c in enumerate(self.counts):
            w.writerow([k, c])
        w.writerow(["euler_characteristic", euler_characteristic(self)])
        return buf.getvalue()


def _complex_at(S: SafeSet, resolution: int) -> CubicalComplex:
    n = S.n
    V = S.vertex_values(resolution) >= 0
    top = np.ones(tuple(resolution for _ in range(n)), dtype=bool)
    for corner in itertools.product((0, 1), repeat=n):
        sl = tuple(slice(c, c + resolution) for c in corner)
        top &= V[sl]
    gen = np.zeros(V.shape, dtype=bool)
    gen[tuple(slice(0, resolution) for _ in range(n))] = top
    ok, _ = S.compactness()
    cx = CubicalComplex.from_generators({tuple(range(n)): gen}, n, resolution, S.axes(resolution),
                                        top_cells=top, clipped=not ok)
    if not ok:
        cx.notes.append("h >= 0 on part of the bounding box: complex approximates C intersected with bbox")
    return cx


def build_cubical_complex(S: SafeSet, check_refinement: bool = True) -> CubicalComplex:
    """Cubical approximation of C by the corner rule.

    A top cell is included iff h >= 0 at all 2^n corners (exact zeros lifted
    by ETA); the result is closed under faces. With ``check_refinement`` the
    construction is repeated at twice the resolution and
    :class:`ResolutionError` is raised if the Euler characteristic changes.
    """
    if S.n not in (1, 2, 3):
        raise GeometryError(f"Euler characteristic supported for n in {{1, 2, 3}}, got n={S.n}")
    key = ("complex", S.resolution, check_refinement)
    if key in S._cache:
        return S._cache[key]
    cx = _complex_at(S, S.resolution)
    if cx.clipped:
        warnings.warn(f"safe set {S.name or S.h} is not compact inside its bounding box; "
                      "Euler characteristic refers to C intersected with bbox", stacklevel=2)
    if check_refinement:
        fine = _complex_at(S, 2 * S.resolution)
        chi, chi_fine = euler_characteristic(cx), euler_characteristic(fine)
        if chi != chi_fine:
            raise ResolutionError(f"Euler characteristic {chi} at resolution {S.resolution} "
                                  f"but {chi_fine} at {2 * S.resolution}; refine the grid")
        cx.notes.append(f"stable under refinement to resolution {2 * S.resolution}")
    S._cache[key] = cx
    return cx


def boundary_complex(K: CubicalComplex) -> CubicalComplex:
    """Topological boundary of a full-dimensional cubical complex.

    Generated by the (n-1)-faces that belong to exactly one included top
    cell, then closed under faces.
    """
    n = K.n
    full = tuple(range(n))
    top = K.masks.get(full)
    gens = {}
    if top is not None:
        for d in range(n):
            ftype = tuple(a for a in full if a != d)
            offs = [0] * n
            offs[d] = 1
            # face at vertex i (normal d) is shared by top cells i and i - e_d
            count = top.astype(np.int8) + _shift(top, offs).astype(np.int8)
            gens[ftype] = count == 1
    return CubicalComplex.from_generators(gens, n, K.resolution, K.axes)


def euler_characteristic(K: CubicalComplex) -> int:
    return int(sum((-1) ** k * c for k, c in enumerate(K.counts)))


# --------------------------------------------------------------------------
# Zero-set sampling


def _edge_seeds(S: SafeSet, resolution: int) -> np.ndarray:
    H = S.vertex_values(resolution)
    axes = S.axes(resolution)
    seeds = []
    for d in range(S.n):
        a = np.take(H, np.arange(resolution), axis=d)
        b = np.take(H, np.arange(1, resolution + 1), axis=d)
        hit = (a >= 0) != (b >= 0)
        idx = np.argwhere(hit)
        if len(idx) == 0:
            continue
        t = a[hit] / (a[hit] - b[hit])
        pts = np.stack([axes[k][idx[:, k]] for k in range(S.n)], axis=1)
        step = axes[d][1] - axes[d][0]
        pts[:, d] += t * step
        seeds.append(pts)
    return np.concatenate(seeds) if seeds else np.zeros((0, S.n))


def _project_to_zero_set(S: SafeSet, P: np.ndarray, tol: float = H_TOL, max_iter: int = 60):
    """Damped Newton along grad h to |h| <= tol. Returns (points, converged mask)."""
    P = P.copy()
    h = S.value(P)
    done = np.abs(h) <= tol
    for _ in range(max_iter):
        act = ~done & np.isfinite(h)
        if not act.any():
            break
        Pa, ha = P[act], h[act]
        g = S.grad(Pa)
        gg = np.einsum("ij,ij->i", g, g)
        good = gg > 0
        step = np.where(good[:, None], (ha / np.where(good, gg, 1.0))[:, None] * g, 0.0)
        lam = np.ones(len(Pa))
        newP, newh = Pa, ha
        for _ in range(30):
            cand = Pa - lam[:, None] * step
            ch = S.value(cand)
            better = np.abs(ch) < np.abs(ha)
            accept = better | (lam < 1e-8)
            newP = np.where(accept[:, None], cand, newP)
            newh = np.where(accept, ch, newh)
            if accept.all():
                break
            lam = np.where(accept, lam, lam / 2)
        P[act] = newP
        h[act] = newh
        done = np.abs(h) <= tol
    return P, done & np.all(np.isfinite(P), axis=1)


def _dedupe(P: np.ndarray, radius: float) -> np.ndarray:
    if len(P) == 0:
        return P
    tree = cKDTree(P)
    keep = np.ones(len(P), dtype=bool)
    for i, j in sorted(tree.query_pairs(radius)):
        if keep[i] and keep[j]:
            keep[j] = False
    return P[keep]


def _farthest_point_subset(P: np.ndarray, count: int) -> np.ndarray:
    if len(P) <= count:
        return P
    chosen = [0]
    d = np.linalg.norm(P - P[0], axis=1)
    for _ in range(count - 1):
        i = int(np.argmax(d))
        chosen.append(i)
        d = np.minimum(d, np.linalg.norm(P - P[i], axis=1))
    return P[np.sort(chosen)]


def zero_set_points(S: SafeSet, resolution: int | None = None) -> np.ndarray:
    """All projected zero-set points from grid-edge sign changes (unfiltered)."""
    r = resolution or S.resolution
    key = ("zeroset", r)
    if key in S._cache:
        return S._cache[key]
    seeds = _edge_seeds(S, r)
    if len(seeds) == 0:
        raise DegenerateSetError("zero set of h is empty inside the bounding box: C has no boundary there")
    P, ok = _project_to_zero_set(S, seeds)
    inside = np.all((P >= S.bbox[:, 0]) & (P <= S.bbox[:, 1]), axis=1)
    ok &= inside
    failed = int((~ok).sum())
    if failed:
        msg = f"{failed} of {len(seeds)} zero-set seeds failed to converge"
        if failed > 0.1 * len(seeds):
            raise SamplingError(msg)
        warnings.warn(msg, stacklevel=2)
    P = _dedupe(P[ok], float(np.min(S.spacing(r))) / 2)
    S._cache[key] = P
    return P


@dataclass
class RegularValueReport:
    min_grad_norm: float
    witness: np.ndarray
    passed: bool
    samples: int


def regular_value_check(S: SafeSet) -> RegularValueReport:
    """Minimum |grad h| over the sampled zero set; passes iff >= EPS_REG."""
    P = zero_set_points(S)
    norms = np.linalg.norm(S.grad(P), axis=1)
    norms = np.where(np.isfinite(norms), norms, 0.0)
    i = int(np.argmin(norms))
    return RegularValueReport(float(norms[i]), P[i], bool(norms[i] >= EPS_REG), len(P))


def boundary_sample(S: SafeSet, count: int | None = 200) -> np.ndarray:
    """Points on the zero set of h with |h| <= 1e-10 and |grad h| >= EPS_REG.

    Seeds come from sign changes along grid edges, are projected by damped
    Newton, deduplicated at half the grid spacing and thinned to ``count``
    well-spread points (farthest-point order). The grid is refined up to
    twice if too few points are found.
    """
    key = ("bsample", count)
    if key in S._cache:
        return S._cache[key]
    r = S.resolution
    for _ in range(3):
        P = zero_set_points(S, r)
        g = np.linalg.norm(S.grad(P), axis=1)
        P = P[np.isfinite(g) & (g >= EPS_REG)]
        if count is None or len(P) >= count:
            break
        r *= 2
    if count is not None and len(P) < count:
        warnings.warn(f"only {len(P)} boundary samples available (requested {count})", stacklevel=2)
    P = _farthest_point_subset(P, count) if count is not None else P
    S._cache[key] = P
    return P


def samples_to_csv(P: np.ndarray, S: SafeSet | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    n = P.shape[1] if P.ndim == 2 else 0
    w.writerow(state_names(n) + (["h"] if S is not None else []))
    hv = S.value(P) if S is not None and len(P) else []
    for i, p in enumerate(P):
        w.writerow([repr(float(v)) for v in p] + ([repr(float(hv[i]))] if S is not None else []))
    return buf.getvalue()


# --------------------------------------------------------------------------
# Boundary classification


class Label(str, enum.Enum):
    INWARD = "Inward"
    TANGENT = "Tangent"
    OUTWARD = "Outward"


class Summary(str, enum.Enum):
    ALL_INWARD = "AllInward"
    INWARD_OR_TANGENT = "InwardOrTangent"
    SOME_OUTWARD = "SomeOutward"


@dataclass
class BoundaryClassification:
    point: np.ndarray
    value: float
    label: Label
    tolerance: float


@dataclass
class BoundaryReport:
    classifications: list
    summary: Summary

    @property
    def values(self) -> np.ndarray:
        return np.array([c.value for c in self.classifications])

    @property
    def labels(self) -> list:
        return [c.label for c in self.classifications]

    def counts(self) -> dict:
        return {lab.value: sum(c.label is lab for c in self.classifications) for lab in Label}

    def worst(self) -> BoundaryClassification | None:
        if not self.classifications:
            return None
        return min(self.classifications, key=lambda c: c.value)


def tangent_tolerance(field_norm, grad_norm):
    return 1e-8 * (1.0 + field_norm * grad_norm)


def classify_boundary(S: SafeSet, X: VectorField, pts) -> BoundaryReport:
    """Label dh_p X_p at each boundary point as Inward, Tangent or Outward."""
    P = np.atleast_2d(np.asarray(pts, dtype=float))
    V = X.batch(P)
    if not np.all(np.isfinite(V)):
        bad = P[~np.all(np.isfinite(V), axis=1)][0]
        raise GeometryError(f"vector field evaluation failed at {bad.tolist()}")
    G = S.grad(P)
    vals = np.einsum("ij,ij->i", G, V)
    tols = tangent_tolerance(np.linalg.norm(V, axis=1), np.linalg.norm(G, axis=1))
    out = []
    for p, v, t in zip(P, vals, tols):
        lab = Label.INWARD if v > t else (Label.OUTWARD if v < -t else Label.TANGENT)
        out.append(BoundaryClassification(p, float(v), lab, float(t)))
    if any(c.label is Label.OUTWARD for c in out):
        summary = Summary.SOME_OUTWARD
    elif all(c.label is Label.INWARD for c in out):
        summary = Summary.ALL_INWARD
    else:
        summary = Summary.INWARD_OR_TANGENT
    return BoundaryReport(out, summary)
