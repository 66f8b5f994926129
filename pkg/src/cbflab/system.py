"""Control systems, input sets, controllers and vector fields.

State space is R^n in user-declared coordinates; states are named x1..xn and
inputs u1..um in all expressions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dsl import DomainError, Expression, differentiate, lambdify, parse_expr

TOL_SET = 1e-9


def state_names(n: int) -> list[str]:
    return [f"x{i + 1}" for i in range(n)]


def input_names(m: int) -> list[str]:
    return [f"u{i + 1}" for i in range(m)]


def _as_exprs(items) -> tuple[Expression, ...]:
    return tuple(parse_expr(e) if isinstance(e, str) else e for e in items)


def _check_vars(exprs, allowed: set[str], what: str) -> None:
    for e in exprs:
        extra = e.free_vars() - allowed
        if extra:
            raise ValueError(f"{what} '{e}' references unknown variables {sorted(extra)}")


def _broadcast_cols(values, count: int) -> np.ndarray:
    return np.stack([np.broadcast_to(np.asarray(v, dtype=float), (count,)) for v in values], axis=-1)


class VectorField:
    """A vector field on R^n.

    ``fn`` maps one point (shape ``(n,)``) to its vector; ``batch_fn``, when
    given, maps an ``(N, n)`` array of points to ``(N, n)`` vectors.
    Instances are immutable and evaluation is pure.
    """

    def __init__(self, fn: Callable | None, n: int, batch_fn: Callable | None = None,
                 name: str = "", smooth: bool = True):
        if fn is None and batch_fn is None:
            raise ValueError("need fn or batch_fn")
        self.n = int(n)
        self._fn = fn
        self._batch_fn = batch_fn
        self.name = name
        self.smooth = smooth

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if self._fn is None:
            return self._batch_fn(p[None, :])[0]
        return np.asarray(self._fn(p), dtype=float).reshape(self.n)

    def batch(self, points) -> np.ndarray:
        P = np.atleast_2d(np.asarray(points, dtype=float))
        if self._batch_fn is not None:
            return np.asarray(self._batch_fn(P), dtype=float).reshape(len(P), self.n)
        if len(P) == 0:
            return np.zeros((0, self.n))
        return np.array([self(p) for p in P], dtype=float).reshape(len(P), self.n)

    @classmethod
    def from_expressions(cls, exprs: Sequence[Expression | str], name: str = "",
                         params: dict[str, float] | None = None) -> "VectorField":
        exprs = _as_exprs(exprs)
        n = len(exprs)
        names = state_names(n)
        params = dict(params or {})
        _check_vars(exprs, set(names) | set(params), "field component")
        fn = lambdify(exprs, names + list(params))
        pvals = list(params.values())

        def single(p):
            return np.array(fn(*p, *pvals), dtype=float)

        def batch(P):
            return _broadcast_cols(fn(*P.T, *pvals), len(P))

        field_ = cls(single, n, batch, name=name or "[" + ", ".join(map(str, exprs)) + "]")
        field_.expressions = exprs
        return field_

    @classmethod
    def constant(cls, v) -> "VectorField":
        v = np.asarray(v, dtype=float)
        return cls(lambda p: v.copy(), len(v), lambda P: np.tile(v, (len(P), 1)), name=f"const{v.tolist()}")

    def _combine(self, other: "VectorField", a: float, b: float, name: str) -> "VectorField":
        if other.n != self.n:
            raise ValueError("dimension mismatch")
        return VectorField(lambda p: a * self(p) + b * other(p), self.n,
                           lambda P: a * self.batch(P) + b * other.batch(P),
                           name=name, smooth=self.smooth and other.smooth)

    def __add__(self, other: "VectorField") -> "VectorField":
        return self._combine(other, 1.0, 1.0, f"({self.name}) + ({other.name})")

    def __sub__(self, other: "VectorField") -> "VectorField":
        return self._combine(other, 1.0, -1.0, f"({self.name}) - ({other.name})")

    def __mul__(self, c: float) -> "VectorField":
        c = float(c)
        return VectorField(lambda p: c * self(p), self.n, lambda P: c * self.batch(P),
                           name=f"{c!r}*({self.name})", smooth=self.smooth)

    __rmul__ = __mul__

    def __neg__(self) -> "VectorField":
        return self * -1.0

    def __repr__(self) -> str:
        return f"VectorField(n={self.n}, {self.name})"


# --------------------------------------------------------------------------
# Input sets


@dataclass(frozen=True)
class FullSpace:
    m: int
    bounded = False

    def project(self, u: np.ndarray) -> np.ndarray:
        return u

    def distance(self, u) -> float:
        return 0.0


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple
    bounded = True

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", tuple(lo.tolist()))
        object.__setattr__(self, "upper", tuple(hi.tolist()))

    @property
    def m(self) -> int:
        return len(self.lower)

    def project(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.lower, self.upper)

    def distance(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(np.linalg.norm(u - self.project(u)))


@dataclass(frozen=True)
class Ball:
    radius: float
    m: int
    bounded = True

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    def project(self, u: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(u, axis=-1, keepdims=True)
        scale = np.where(norm > self.radius, self.radius / np.where(norm > 0, norm, 1.0), 1.0)
        return u * scale

    def distance(self, u) -> float:
        return float(max(0.0, np.linalg.norm(u) - self.radius))


@dataclass(frozen=True)
class Sphere:
    radius: float
    m: int
    bounded = True

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def project(self, u: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(u, axis=-1, keepdims=True)
        e1 = np.zeros(u.shape[-1])
        e1[0] = 1.0
        direction = np.where(norm > 0, u / np.where(norm > 0, norm, 1.0), e1)
        return self.radius * direction

    def distance(self, u) -> float:
        return float(abs(np.linalg.norm(u) - self.radius))


@dataclass(frozen=True)
class FinitePoints:
    points: tuple
    bounded = True

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.size == 0:
            raise ValueError("FinitePoints needs at least one point")
        object.__setattr__(self, "points", tuple(map(tuple, pts.tolist())))

    @property
    def m(self) -> int:
        return len(self.points[0])

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    def project(self, u: np.ndarray) -> np.ndarray:
        pts = self.array
        idx = np.argmin(np.linalg.norm(pts[None] - np.atleast_2d(u)[:, None], axis=-1), axis=1)
        out = pts[idx]
        return out if np.ndim(u) > 1 else out[0]

    def distance(self, u) -> float:
        return float(np.min(np.linalg.norm(self.array - np.asarray(u, dtype=float), axis=1)))


InputSet = FullSpace | Box | Ball | Sphere | FinitePoints


def membership(u, s: InputSet) -> tuple[bool, float]:
    """Return ``(u in s, distance from u to s)``.

    Box and FullSpace membership is exact; Ball and Sphere allow ``TOL_SET``
    on the norm; FinitePoints uses the same tolerance on the distance.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    if len(u) != s.m:
        raise ValueError(f"input has dimension {len(u)}, input set has {s.m}")
    d = s.distance(u)
    if isinstance(s, FullSpace):
        return True, 0.0
    if isinstance(s, Box):
        return bool(np.all(u >= s.lower) and np.all(u <= s.upper)), d
    return bool(d <= TOL_SET), d


# --------------------------------------------------------------------------
# Systems


@dataclass(frozen=True)
class ControlAffineSystem:
    """x' = X0(x) + sum_i u_i X_i(x) with u restricted to ``input_set``."""

    n: int
    m: int
    drift: tuple
    inputs: tuple
    input_set: InputSet = None
    name: str = ""
    _fn: Callable = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1 or self.m < 0:
            raise ValueError("need n >= 1 and m >= 0")
        drift = _as_exprs(self.drift)
        inputs = tuple(_as_exprs(col) for col in self.inputs)
        if len(drift) != self.n:
            raise ValueError(f"drift has {len(drift)} components, expected n={self.n}")
        if len(inputs) != self.m or any(len(col) != self.n for col in inputs):
            raise ValueError(f"inputs must be {self.m} vector fields with {self.n} components each")
        allowed = set(state_names(self.n))
        _check_vars(drift, allowed, "drift component")
        for col in inputs:
            _check_vars(col, allowed, "input field component")
        input_set = self.input_set if self.input_set is not None else FullSpace(self.m)
        if input_set.m != self.m:
            raise ValueError(f"input set dimension {input_set.m} != m={self.m}")
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "input_set", input_set)
        flat = list(drift) + [e for col in inputs for e in col]
        object.__setattr__(self, "_fn", lambdify(flat, state_names(self.n)))

    @property
    def affine(self) -> bool:
        return True

    def drift_and_matrix(self, P) -> tuple[np.ndarray, np.ndarray]:
        """Drift ``(N, n)`` and input matrices ``(N, n, m)`` at points ``P``."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        N, n, m = len(P), self.n, self.m
        vals = _broadcast_cols(self._fn(*P.T), N)
        d = vals[:, :n]
        G = vals[:, n:].reshape(N, m, n).transpose(0, 2, 1)
        return d, G

    def dynamics_batch(self, P, U) -> np.ndarray:
        d, G = self.drift_and_matrix(P)
        U = np.atleast_2d(np.asarray(U, dtype=float)).reshape(-1, self.m)
        return d + np.einsum("knm,km->kn", G, np.broadcast_to(U, (len(d), self.m)))

    def to_general(self) -> "GeneralSystem":
        us = input_names(self.m)
        dyn = []
        for k in range(self.n):
            e = self.drift[k]
            for i in range(self.m):
                e = e + self.inputs[i][k] * parse_expr(us[i])
            dyn.append(e)
        return GeneralSystem(self.n, self.m, tuple(dyn), self.input_set, name=self.name)


@dataclass(frozen=True)
class GeneralSystem:
    """x' = f(x, u) with u restricted to ``input_set``."""

    n: int
    m: int
    dynamics: tuple
    input_set: InputSet = None
    name: str = ""
    _fn: Callable = field(init=False, repr=False, compare=False)
    _jac_fn: Callable = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1 or self.m < 0:
            raise ValueError("need n >= 1 and m >= 0")
        dyn = _as_exprs(self.dynamics)
        if len(dyn) != self.n:
            raise ValueError(f"dynamics has {len(dyn)} components, expected n={self.n}")
        _check_vars(dyn, set(state_names(self.n)) | set(input_names(self.m)), "dynamics component")
        input_set = self.input_set if self.input_set is not None else FullSpace(self.m)
        if input_set.m != self.m:
            raise ValueError(f"input set dimension {input_set.m} != m={self.m}")
        object.__setattr__(self, "dynamics", dyn)
        object.__setattr__(self, "input_set", input_set)
        names = state_names(self.n) + input_names(self.m)
        object.__setattr__(self, "_fn", lambdify(dyn, names))
        jac = [differentiate(e, v) for e in dyn for v in names]
        object.__setattr__(self, "_jac_fn", lambdify(jac, names))

    @property
    def affine(self) -> bool:
        return False

    def dynamics_batch(self, P, U) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float)).reshape(-1, self.m)
        N = max(len(P), len(U))
        P = np.broadcast_to(P, (N, self.n))
        U = np.broadcast_to(U, (N, self.m))
        return _broadcast_cols(self._fn(*P.T, *U.T), N)

    def jacobian_batch(self, P, U) -> np.ndarray:
        """Jacobian of f w.r.t. (x, u): shape ``(N, n, n + m)``."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float)).reshape(-1, self.m)
        N = max(len(P), len(U))
        P = np.broadcast_to(P, (N, self.n))
        U = np.broadcast_to(U, (N, self.m))
        vals = _broadcast_cols(self._jac_fn(*P.T, *U.T), N)
        return vals.reshape(N, self.n, self.n + self.m)


System = ControlAffineSystem | GeneralSystem


def _point_context(exc: DomainError, p, u) -> DomainError:
    return DomainError(f"{exc.args[0]} at state {list(map(float, p))}, input {list(map(float, u))}", exc.subexpr)


def eval_dynamics(sys: System, p, u) -> np.ndarray:
    """F(p, u). Membership of u in the input set is not enforced here."""
    p = np.asarray(p, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if len(p) != sys.n or len(u) != sys.m:
        raise ValueError(f"expected p in R^{sys.n} and u in R^{sys.m}")
    out = sys.dynamics_batch(p[None], u[None])[0]
    if not np.all(np.isfinite(out)):
        _strict_recheck(sys, p, u)
    return out


def _strict_recheck(sys: System, p, u) -> None:
    # locate the offending subexpression with the strict evaluator
    b = dict(zip(state_names(sys.n), map(float, p)))
    b.update(zip(input_names(sys.m), map(float, u)))
    exprs = sys.dynamics if isinstance(sys, GeneralSystem) else \
        list(sys.drift) + [e for col in sys.inputs for e in col]
    for e in exprs:
        try:
            e.evaluate(b)
        except DomainError as exc:
            raise _point_context(exc, p, u) from None


def input_matrix(sys: ControlAffineSystem, p) -> np.ndarray:
    """G(p) with columns X_1(p), ..., X_m(p); shape ``(n, m)``."""
    p = np.asarray(p, dtype=float).reshape(-1)
    if len(p) != sys.n:
        raise ValueError(f"expected p in R^{sys.n}")
    _, G = sys.drift_and_matrix(p[None])
    return G[0]


# --------------------------------------------------------------------------
# Controllers


class Controller:
    """Feedback law p -> u in R^m."""

    m: int

    def __call__(self, p) -> np.ndarray:
        raise NotImplementedError

    def batch(self, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return np.array([self(p) for p in P], dtype=float).reshape(len(P), self.m)


class ExpressionController(Controller):
    def __init__(self, exprs, n: int):
        self.exprs = _as_exprs(exprs)
        self.m = len(self.exprs)
        self.n = n
        _check_vars(self.exprs, set(state_names(n)), "controller component")
        self._fn = lambdify(self.exprs, state_names(n))

    def __call__(self, p) -> np.ndarray:
        return np.array(self._fn(*np.asarray(p, dtype=float)), dtype=float).reshape(self.m)

    def batch(self, P) -> np.ndarray:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if self.m == 0:
            return np.zeros((len(P), 0))
        return _broadcast_cols(self._fn(*P.T), len(P))


class TabulatedController(Controller):
    """Pointwise solver callback, e.g. a QP safety filter. Must be stateless."""

    def __init__(self, fn: Callable, m: int, name: str = ""):
        self._fn = fn
        self.m = m
        self.name = name

    def __call__(self, p) -> np.ndarray:
        return np.asarray(self._fn(np.asarray(p, dtype=float)), dtype=float).reshape(self.m)


class ZeroController(Controller):
    def __init__(self, m: int):
        self.m = m

    def __call__(self, p) -> np.ndarray:
        return np.zeros(self.m)

    def batch(self, P) -> np.ndarray:
        return np.zeros((len(np.atleast_2d(P)), self.m))


def closed_loop(sys: System, k: Controller) -> VectorField:
    """The closed-loop field p -> F(p, k(p)).

    Continuity of the result is the caller's modeling responsibility.
    """
    if k.m != sys.m:
        raise ValueError(f"controller output dimension {k.m} != system input dimension {sys.m}")

    def single(p):
        return eval_dynamics(sys, p, k(p))

    def batch(P):
        return sys.dynamics_batch(P, k.batch(P))

    return VectorField(single, sys.n, batch, name=f"closed_loop({sys.name or 'sys'})")
