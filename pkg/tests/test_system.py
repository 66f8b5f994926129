import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cbflab.dsl import DomainError
from cbflab.system import (Ball, Box, ControlAffineSystem, ExpressionController, FinitePoints, FullSpace,
                           GeneralSystem, Sphere, TabulatedController, VectorField, ZeroController, closed_loop,
                           eval_dynamics, input_matrix, membership)

NONHOLONOMIC = ControlAffineSystem(3, 2, ("0", "0", "0"), (("1", "0", "x2"), ("0", "1", "-x1")))
vectors = arrays(float, 3, elements=st.floats(-5, 5))


def test_affine_dynamics_match_general_form(rng):
    gen = NONHOLONOMIC.to_general()
    P, U = rng.normal(size=(30, 3)), rng.normal(size=(30, 2))
    np.testing.assert_allclose(NONHOLONOMIC.dynamics_batch(P, U), gen.dynamics_batch(P, U), rtol=1e-14)
    for p, u in zip(P[:5], U[:5]):
        expected = np.array([u[0], u[1], p[1] * u[0] - p[0] * u[1]])
        np.testing.assert_allclose(eval_dynamics(NONHOLONOMIC, p, u), expected, rtol=1e-14)


def test_input_matrix_columns_are_input_fields():
    G = input_matrix(NONHOLONOMIC, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(G, [[1, 0], [0, 1], [2, -1]])


def test_general_jacobian_matches_finite_differences(rng):
    sys = GeneralSystem(2, 1, ("x2 * u1^2", "sin(x1) + u1 * x1"))
    p, u = rng.normal(size=2), rng.normal(size=1)
    J = sys.jacobian_batch(p[None], u[None])[0]
    z = np.concatenate([p, u])
    f = lambda w: sys.dynamics_batch(w[:2][None], w[2:][None])[0]
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-6
        np.testing.assert_allclose(J[:, j], (f(z + e) - f(z - e)) / 2e-6, atol=1e-8)


def test_constructor_validation():
    with pytest.raises(ValueError, match="unknown variables"):
        ControlAffineSystem(2, 1, ("x1", "x3"), (("1", "0"),))
    with pytest.raises(ValueError, match="vector fields"):
        ControlAffineSystem(2, 2, ("x1", "x2"), (("1", "0"),))
    with pytest.raises(ValueError, match="input set dimension"):
        ControlAffineSystem(2, 1, ("x1", "x2"), (("1", "0"),), Ball(1.0, 2))
    with pytest.raises(ValueError, match="unknown variables"):
        GeneralSystem(1, 1, ("u2",))


def test_domain_error_names_point():
    sys = GeneralSystem(1, 1, ("log(x1) + u1",))
    with pytest.raises(DomainError, match="at state"):
        eval_dynamics(sys, [-1.0], [0.0])


def test_membership_tolerances():
    assert membership([1.0, 0.0], Sphere(1.0, 2)) == (True, 0.0)
    ok, d = membership([0.5, 0.0], Sphere(1.0, 2))
    assert not ok and d == pytest.approx(0.5)
    assert membership([1 + 5e-10, 0.0], Ball(1.0, 2))[0]
    assert not membership([1 + 1e-8, 0.0], Ball(1.0, 2))[0]
    assert membership([0.5, -1.0], Box((-1, -1), (1, 1)))[0]
    assert not membership([0.5, -1.0 - 1e-15], Box((-1, -1), (1, 1)))[0]
    assert membership([1e9, 3.0], FullSpace(2))[0]
    pts = FinitePoints(((0, 0), (1, 1)))
    assert membership([1.0, 1.0], pts)[0] and not membership([0.5, 0.5], pts)[0]
    with pytest.raises(ValueError):
        membership([1.0], Ball(1.0, 2))


@given(vectors)
def test_projections_land_in_set(u):
    for s in (Ball(1.5, 3), Sphere(2.0, 3), Box((-1, 0, -2), (1, 1, 2)),
              FinitePoints(((0, 0, 0), (1, 2, 3), (-1, 0, 1)))):
        q = s.project(u)
        assert membership(q, s)[0]
        # no other set point is closer than the projection
        others = np.array([s.project(v) for v in np.random.default_rng(0).normal(scale=3, size=(40, 3))])
        assert np.linalg.norm(u - q) <= np.linalg.norm(others - u, axis=1).min() + 1e-9


def test_invalid_input_sets():
    with pytest.raises(ValueError):
        Ball(0.0, 2)
    with pytest.raises(ValueError):
        Box((1.0,), (0.0,))
    with pytest.raises(ValueError):
        FinitePoints(())


def test_vector_field_algebra(rng):
    X = VectorField.from_expressions(["x2", "-x1"])
    Y = VectorField.constant([1.0, 2.0])
    P = rng.normal(size=(10, 2))
    np.testing.assert_allclose((X + 2 * Y).batch(P), np.c_[P[:, 1] + 2, -P[:, 0] + 4])
    np.testing.assert_allclose((-X).batch(P), -X.batch(P))
    np.testing.assert_allclose(X(P[0]), X.batch(P[:1])[0])
    Z = VectorField.from_expressions(["eps * x1"], params={"eps": 0.25})
    assert Z([2.0])[0] == 0.5


def test_closed_loop_and_controllers(rng):
    sys = ControlAffineSystem(2, 2, ("x1", "x2"), (("1", "0"), ("0", "1")))
    k = ExpressionController(["-2*x1", "-2*x2"], 2)
    X = closed_loop(sys, k)
    P = rng.normal(size=(8, 2))
    np.testing.assert_allclose(X.batch(P), -P)
    T = TabulatedController(lambda p: -2 * p, 2)
    np.testing.assert_allclose(closed_loop(sys, T).batch(P), -P)
    np.testing.assert_array_equal(ZeroController(2).batch(P), np.zeros((8, 2)))
    with pytest.raises(ValueError):
        closed_loop(sys, ZeroController(1))
