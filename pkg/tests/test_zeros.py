import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cbflab.geometry import SafeSet, Summary
from cbflab.system import VectorField
from cbflab.zeros import (Method, PreconditionError, ZeroOnBoundaryError, default_deltas, locate_zeros,
                          newton_polish, perturbation_sequence_zero, topological_degree, inward_gradient_field,
                          verify_poincare_hopf)
from conftest import DISK
from oracles import random_inward_field


def linear_field(A, c=None):
    A = np.asarray(A, dtype=float)
    c = np.zeros(len(A)) if c is None else np.asarray(c, dtype=float)
    return VectorField(lambda p: A @ p + c, len(A), lambda P: P @ A.T + c)


well_conditioned = arrays(float, (2, 2), elements=st.floats(-3, 3)).filter(
    lambda A: abs(np.linalg.det(A)) > 0.1 * (1 + np.abs(A).max() ** 2))


@given(well_conditioned)
def test_degree_of_linear_field_is_sign_of_determinant_2d(A):
    res = topological_degree(linear_field(A), [(-1, 1.3), (-0.7, 1)])
    assert res.degree == int(np.sign(np.linalg.det(A)))


@given(arrays(float, (3, 3), elements=st.floats(-3, 3)).filter(
    lambda A: abs(np.linalg.det(A)) > 0.2 * (1 + np.abs(A).max() ** 3)))
def test_degree_of_linear_field_is_sign_of_determinant_3d(A):
    res = topological_degree(linear_field(A), [(-1, 1.2), (-0.8, 1), (-1.1, 0.9)])
    assert res.degree == int(np.sign(np.linalg.det(A)))


def test_degree_without_zero_is_zero():
    assert topological_degree(linear_field(np.eye(2), [5.0, 0.0]), [(-1, 1)] * 2).degree == 0


def test_degree_1d():
    X = VectorField.from_expressions(["x1^3 - x1"])
    assert topological_degree(X, [(-2, 2)]).degree == 1
    assert topological_degree(X, [(-0.5, 0.5)]).degree == -1


def test_degree_counts_index_sum():
    # zeros at (+-0.5, 0) with indices +1 and -1
    X = VectorField.from_expressions(["x1^2 - 0.25", "x2"])
    assert topological_degree(X, [(0, 1), (-1, 1)]).degree == 1
    assert topological_degree(X, [(-1, 0), (-1, 1)]).degree == -1
    assert topological_degree(X, [(-1, 1), (-1, 1)]).degree == 0


def test_degree_higher_winding():
    # z^2 in complex notation winds twice
    X = VectorField.from_expressions(["x1^2 - x2^2", "2*x1*x2"])
    assert topological_degree(X, [(-1, 1)] * 2).degree == 2


def test_zero_on_box_boundary_raises():
    with pytest.raises(ZeroOnBoundaryError):
        topological_degree(linear_field(np.eye(2)), [(0, 1), (-1, 1)])


def test_newton_polish_converges():
    X = VectorField.from_expressions(["x1^3 + x1 - 1", "x2 - x1"])
    p, r = newton_polish(X, [0.5, 0.5], 1e-12)
    assert r <= 1e-12
    assert p[0] ** 3 + p[0] == pytest.approx(1.0, abs=1e-12)


def test_locate_zeros_certifies_each_zero():
    S = SafeSet(DISK, [(-1.5, 1.5)] * 2, 32)
    X = VectorField.from_expressions(["x1^2 - 0.25", "x2"])
    certs = locate_zeros(X, S)
    pts = sorted(c.point[0] for c in certs)
    assert pts == pytest.approx([-0.5, 0.5], abs=1e-8)
    for c in certs:
        assert c.residual <= 1e-8
        assert c.method is Method.DEGREE_ISOLATION
        lo, hi = np.asarray(c.box).T
        assert np.all(lo <= c.point) and np.all(c.point <= hi)


def test_zeros_outside_safe_set_are_ignored():
    S = SafeSet(DISK, [(-2.5, 2.5)] * 2, 32)
    X = VectorField.from_expressions(["x1 - 2", "x2"])
    assert locate_zeros(X, S) == []


def test_zero_certificate_json_round_trip():
    S = SafeSet(DISK, [(-1.5, 1.5)] * 2, 32)
    (c,) = locate_zeros(linear_field(-np.eye(2), [0.1, -0.2]), S)
    d = json.loads(c.to_json())
    assert d["method"] == "DegreeIsolation"
    np.testing.assert_allclose(d["point"], [0.1, -0.2], atol=1e-9)


def test_perturbation_sequence_handles_tangent_field():
    S = SafeSet(DISK, [(-1.5, 1.5)] * 2, 32)
    X = VectorField.from_expressions(["-x2", "x1"])
    seq = perturbation_sequence_zero(X, inward_gradient_field(S), S)
    assert seq.deltas == default_deltas()
    assert len(seq.certificates) == 6
    assert seq.limit_residual <= 1e-6
    assert seq.polished is not None and seq.polished.method is Method.PERTURBATION_LIMIT


def test_perturbation_sequence_preconditions():
    S = SafeSet(DISK, [(-1.5, 1.5)] * 2, 32)
    X = VectorField.from_expressions(["-x2", "x1"])
    with pytest.raises(PreconditionError):
        perturbation_sequence_zero(X, inward_gradient_field(S), S, deltas=[0.1, 0.2])
    with pytest.raises(PreconditionError):
        perturbation_sequence_zero(X, -1.0 * inward_gradient_field(S), S)


def test_poincare_hopf_branches():
    S = SafeSet(DISK, [(-1.5, 1.5)] * 2, 32)
    direct = verify_poincare_hopf(VectorField.from_expressions(["-x1 + 0.3", "-x2"]), S)
    assert direct.branch == "direct" and direct.summary is Summary.ALL_INWARD
    assert direct.certificates[0].point == pytest.approx([0.3, 0.0], abs=1e-8)
    pert = verify_poincare_hopf(VectorField.from_expressions(["-x2", "x1"]), S)
    assert pert.branch == "perturbation" and pert.zero_found
    out = verify_poincare_hopf(VectorField.from_expressions(["x1", "x2 + 2"]), S)
    assert out.summary is Summary.SOME_OUTWARD and not out.zero_found
    assert not out.theorem_contradiction


def test_poincare_hopf_zero_chi_is_informational():
    S = SafeSet("0.16 - (sqrt(x1^2 + x2^2) - 1)^2", [(-2.5, 2.5)] * 2, 64)
    rep = verify_poincare_hopf(VectorField.from_expressions(["-x2", "x1"]), S)
    assert rep.euler_characteristic == 0 and not rep.zero_found
    assert any("no zero is implied" in n for n in rep.notes)


@given(st.integers(0, 2 ** 32 - 1))
def test_inward_fields_always_have_a_certified_zero(seed):
    S = SafeSet(DISK, [(-1.5, 1.5)] * 2, 32)
    X = VectorField.from_expressions(random_inward_field(np.random.default_rng(seed)))
    certs = locate_zeros(X, S)
    assert certs and min(c.residual for c in certs) <= 1e-8
