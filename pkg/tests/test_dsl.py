import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cbflab.dsl import (Binary, Const, DomainError, ParseError, UnboundVariableError, Unary, Var,
                        differentiate, evaluate, gradient, lambdify, parse_expr, substitute)
from oracles import finite_difference, random_expression


@pytest.mark.parametrize("text, expected", [
    ("1 + 2 * 3", 7.0),
    ("2 ^ 3 ^ 2", 512.0),
    ("2 ** 3", 8.0),
    ("-2 ^ 2", -4.0),
    ("(1 + 2) * 3", 9.0),
    ("8 / 4 / 2", 1.0),
    ("1 - 2 - 3", -4.0),
    ("sqrt(16) + abs(-3) + sign(-2)", 6.0),
    ("2.5e-1 * 4", 1.0),
    ("cos(pi)", -1.0),
])
def test_precedence_and_constants(text, expected):
    assert evaluate(text, {}) == pytest.approx(expected, abs=1e-15)


def test_variables_are_bound_by_name():
    e = parse_expr("x1^2 + 3*x2 - u1")
    assert e.free_vars() == {"x1", "x2", "u1"}
    assert e.evaluate({"x1": 2, "x2": 1, "u1": 0.5}) == 6.5


@pytest.mark.parametrize("text, column", [
    ("1 +", 4),
    ("(x1 + 2", 8),
    ("x1 $ 2", 4),
    ("", 1),
    ("1 2", 3),
    ("sin()", 5),
])
def test_parse_errors_report_position(text, column):
    with pytest.raises(ParseError) as info:
        parse_expr(text)
    assert info.value.line == 1
    assert info.value.column == column


def test_unknown_function_is_a_parse_error():
    with pytest.raises(ParseError, match="unknown function"):
        parse_expr("tan(x1)")


def test_multiline_error_position():
    with pytest.raises(ParseError) as info:
        parse_expr("x1 +\n  * 2")
    assert (info.value.line, info.value.column) == (2, 3)


def test_domain_and_binding_errors():
    with pytest.raises(DomainError) as info:
        evaluate("1 + log(x1)", {"x1": -1.0})
    assert "log(x1)" in str(info.value)
    with pytest.raises(DomainError):
        evaluate("sqrt(x1 - 1)", {"x1": 0.0})
    with pytest.raises(DomainError):
        evaluate("1 / (x1 - x1)", {"x1": 3.0})
    with pytest.raises(UnboundVariableError):
        evaluate("x1 + x2", {"x1": 1.0})


def test_lambdify_returns_nan_instead_of_raising():
    (f,) = [lambdify([parse_expr("log(x1)")], ["x1"])]
    out = f(np.array([-1.0, 1.0]))[0]
    assert math.isnan(out[0]) and out[1] == 0.0


def test_lambdify_vectorizes_and_matches_evaluate(rng):
    e = parse_expr("sin(x1) * exp(x2 / 3) - x1^3 / (2 + cos(x2))")
    f = lambdify([e, differentiate(e, "x1")], ["x1", "x2"])
    P = rng.uniform(-2, 2, (50, 2))
    vals, dvals = f(P[:, 0], P[:, 1])
    for p, v in zip(P, vals):
        assert v == pytest.approx(e.evaluate({"x1": p[0], "x2": p[1]}), rel=1e-14)
    assert dvals.shape == (50,)


@pytest.mark.parametrize("text", [
    "1 - x1^2 - x2^2",
    "-(x1 - x2)^-2",
    "x1 / (x2 * x3)",
    "x1 - (x2 - x3)",
    "(x1^x2)^x3",
    "x1^(x2^x3)",
    "-x1^2",
    "(-x1)^2",
    "0.16 - (sqrt(x1^2 + x2^2) - 1)^2",
    "1e-300 * x1 + 123456789.125",
])
def test_print_parse_round_trip(text):
    e = parse_expr(text)
    assert parse_expr(str(e)) == e


@given(st.integers(0, 2 ** 32 - 1))
def test_round_trip_random_expressions(seed):
    e = parse_expr(random_expression(np.random.default_rng(seed), 3))
    assert parse_expr(str(e)) == e


@given(st.integers(0, 2 ** 32 - 1))
def test_derivative_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    names = ["x1", "x2", "x3"]
    e = parse_expr(random_expression(rng, 3))
    f = lambdify([e], names)
    p = rng.uniform(-1, 1, 3)
    for i, g in enumerate(gradient(e, names)):
        sym = evaluate(g, dict(zip(names, p)))
        fd = finite_difference(lambda q: f(*q)[0], p, i)
        assert abs(sym - fd) <= 1e-6 * max(1.0, abs(sym))


def test_known_derivatives():
    x = {"x1": 0.7, "x2": -1.3}
    cases = [
        ("x1^3", "3*x1^2"),
        ("sin(x1)*x2", "cos(x1)*x2"),
        ("exp(2*x1)", "2*exp(2*x1)"),
        ("log(x1)", "1/x1"),
        ("sqrt(x1)", "0.5/sqrt(x1)"),
    ]
    for f, df in cases:
        assert evaluate(differentiate(f, "x1"), x) == pytest.approx(evaluate(df, x), rel=1e-14)
    assert evaluate(differentiate("x1 * x2", "x3"), x) == 0.0


def test_derivative_simplifies_structural_zeros():
    assert differentiate("x2 + 3", "x1") == Const(0.0)
    assert differentiate("x1", "x1") == Const(1.0)


def test_substitute_replaces_variables_only():
    e = parse_expr("x1 * eps + sin(eps)")
    s = substitute(e, {"eps": 0.5})
    assert s.free_vars() == {"x1"}
    assert s.evaluate({"x1": 2.0}) == pytest.approx(1.0 + math.sin(0.5))
    t = substitute(e, {"eps": parse_expr("x2^2")})
    assert t.evaluate({"x1": 1.0, "x2": 2.0}) == pytest.approx(4.0 + math.sin(4.0))


def test_operator_sugar_builds_trees():
    e = Var("x1") * 2 + 1
    assert e == Binary("+", Binary("*", Var("x1"), Const(2.0)), Const(1.0))
    assert (-Var("x1")) == Unary("neg", Var("x1"))
    assert (Var("x1") ** "x2").evaluate({"x1": 2.0, "x2": 3.0}) == 8.0
