"""The nine acceptance criteria at their stated tolerances and time budgets.

Each test prints one PASS/FAIL line; the lines are repeated in the terminal
summary.
"""
import json
import time
import warnings
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from cbflab.cli import main, run
from cbflab.config import fixture_path, load_config
from cbflab.dsl import evaluate, gradient, lambdify, parse_expr
from cbflab.flow import flow_out, integrate, outward_unit_rate_field
from cbflab.geometry import boundary_complex, build_cubical_complex, euler_characteristic
from cbflab.obstruction import (Outcome, PerturbationField, Status, Theorem, check_neighborhood_family,
                                check_theorem3, span_solvability)
from cbflab.synthesis import StrictnessError, blend, build_local_cover, verify_strict
from cbflab.system import VectorField
from cbflab.zeros import verify_poincare_hopf
from conftest import ACCEPTANCE_LINES
from oracles import (constant_system, finite_difference, random_affine_instance, random_expression,
                     random_inward_field, rank_oracle)


@contextmanager
def criterion(number: int, title: str, budget: float):
    """Record pass/fail and wall time; a run over budget fails the criterion."""
    t = time.perf_counter()
    status, detail = "FAIL", ""
    try:
        yield
        elapsed = time.perf_counter() - t
        if elapsed > budget:
            detail = f" over budget ({budget:g} s)"
            raise AssertionError(f"criterion {number} took {elapsed:.2f} s, budget {budget:g} s")
        status = "PASS"
    except BaseException as exc:
        detail = detail or f" {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        raise
    finally:
        line = f"{status} criterion {number}: {title} [{time.perf_counter() - t:.2f} s]{detail if status == 'FAIL' else ''}"
        print(line)
        ACCEPTANCE_LINES.append(line)


def cfg(name):
    return load_config(fixture_path(name))


def test_criterion_1_euler_characteristics():
    expected = {"disk": 1, "annulus": 0, "ball": 1}
    for name, chi in expected.items():
        with criterion(1, f"chi({name}) = {chi} at resolution 64, stable at 128", 5.0):
            S = cfg(name).safeset
            assert S.resolution == 64
            K = build_cubical_complex(S, check_refinement=True)
            assert euler_characteristic(K) == chi
            assert "stable under refinement to resolution 128" in K.notes
            if name == "ball":
                assert euler_characteristic(boundary_complex(K)) == 2


def test_criterion_2_brockett(tmp_path):
    with criterion(2, "nonholonomic integrator violates Brockett's condition", 10.0):
        out = tmp_path / "brockett.json"
        assert main(["brockett", "--config", "nonholonomic", "--out", str(out)]) == 2
        res = json.loads(out.read_text())["commands"][0]["result"]
        assert res["outcome"] == "Violated"
        d = np.array(res["witness"]["direction"])
        assert np.allclose(np.abs(d), [0, 0, 1])
        ratios = np.array(res["witness"]["residual_over_radius"])
        assert len(ratios) == 9 and np.all(ratios >= 0.9)


def test_criterion_3_theorem3():
    with criterion(3, "sphere inputs violate the non-strict condition, ball inputs do not", 30.0):
        c = cfg("unit_disk_sphere_input")
        v = check_theorem3(c.system, c.safeset, c.fields["radial"])
        assert v.outcome is Outcome.VIOLATED
        assert v.residual_statistics["min"] >= 0.999
        c = cfg("unit_disk_ball_input")
        v = check_theorem3(c.system, c.safeset, c.fields["radial"])
        assert v.outcome is Outcome.NOT_VIOLATED
        assert np.linalg.norm(v.witness["u"]) <= 1e-7


def test_criterion_4_satellite():
    with criterion(4, "reduced satellite: residual equals eps on every rung (Cor1 and T4)", 5.0):
        c = cfg("satellite_reduced")
        Z = c.families["vertical"]
        for theorem in (Theorem.COR1, Theorem.T4):
            v = check_neighborhood_family(c.system, c.safeset, Z, theorem)
            assert v.outcome is Outcome.VIOLATED
            assert len(v.epsilon_ladder) == 10
            for rung in v.epsilon_ladder:
                assert rung["status"] == Status.UNSOLVABLE.value
                assert abs(rung["min_residual"] - rung["eps"]) <= 1e-12
                assert abs(rung["max_residual"] - rung["eps"]) <= 1e-12


def test_criterion_5_poincare_hopf():
    with criterion(5, "50 inward fields certified to 1e-8; rotation field limit within 1e-6", 60.0):
        S = cfg("disk").safeset
        rng = np.random.default_rng(2024)
        for _ in range(50):
            X = VectorField.from_expressions(random_inward_field(rng))
            rep = verify_poincare_hopf(X, S)
            assert rep.branch == "direct" and rep.zero_found, "no zero certified"
            certs = rep.certificates
            best = min(c.residual for c in certs)
            assert best <= 1e-8
            assert np.linalg.norm(X(certs[0].point)) <= 1e-8
        rot = VectorField.from_expressions(["-x2", "x1"])
        rep = verify_poincare_hopf(rot, S)
        assert rep.branch == "perturbation" and rep.zero_found
        assert rep.sequence.limit_residual <= 1e-6


def test_criterion_6_flow_out():
    with criterion(6, "flow-out decay identity within 1e-6 and chi preserved (disk, annulus, slab)", 30.0):
        for name in ("disk", "annulus", "slab"):
            S = cfg(name).safeset
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                F = flow_out(S, 0.2, count=200)
                chi = euler_characteristic(build_cubical_complex(S))
                chi_t = euler_characteristic(build_cubical_complex(F.effective))
            assert len(F.starts) == 200
            assert F.max_identity_error <= 1e-6
            assert chi == chi_t
            # independent re-integration with a different integrator
            Y = outward_unit_rate_field(S)
            times = [0.05, 0.1, 0.2]
            err = 0.0
            for p in F.starts:
                sol = solve_ivp(lambda t, y: Y(y), (0, 0.2), p, method="DOP853", t_eval=times,
                                rtol=1e-12, atol=1e-13)
                err = max(err, float(np.max(np.abs(S.value(sol.y.T) + times))))
            assert err <= 1e-6, f"{name}: {err:.3g}"


def test_criterion_7_forward_invariance():
    with criterion(7, "QP-filtered closed loop stays in C; outward field fails with a witness", 30.0):
        rep = run(cfg("unit_disk"), ["flow-invariance"])
        res = rep.commands[0].result
        assert rep.commands[0].status == "ok"
        assert res["field"].startswith("qp")
        assert res["initial_points"] == 100 and res["horizon"] == 10.0
        assert res["min_h"] >= -1e-6 and res["passed"]
        rep = run(cfg("outward_field"), ["flow-invariance"])
        res = rep.commands[0].result
        assert not res["passed"] and res["min_h"] < -1e-6
        assert res["worst_start"] is not None and "violating_trajectory" in res


def test_criterion_8_synthesis():
    with criterion(8, "cover and blend give a strict controller; non-strict variant fails at the boundary", 60.0):
        c = cfg("single_integrator")
        patches = build_local_cover(c.system, c.safeset, c.alpha)
        rep = verify_strict(c.system, c.safeset, c.alpha, blend(patches), samples=10_000)
        assert rep.samples >= 10_000
        assert rep.min_slack > 0 and rep.holes == 0
        assert rep.max_weight_error <= 1e-12
        c = cfg("unit_disk_sphere_input")
        with pytest.raises(StrictnessError) as info:
            build_local_cover(c.system, c.safeset, c.alpha)
        assert abs(c.safeset.value(np.asarray(info.value.witness)[None])[0]) <= 1e-10


def test_criterion_9_numerical_hygiene():
    with criterion(9, "derivatives, integrator order and span solvability agree with oracles", 120.0):
        rng = np.random.default_rng(9)
        names = ["x1", "x2", "x3"]
        for _ in range(1000):
            e = parse_expr(random_expression(rng, 3))
            f = lambdify([e], names)
            p = rng.uniform(-1, 1, 3)
            for i, g in enumerate(gradient(e, names)):
                sym = evaluate(g, dict(zip(names, p)))
                fd = finite_difference(lambda q: f(*q)[0], p, i)
                assert abs(sym - fd) <= 1e-6 * max(1.0, abs(sym)), str(e)

        # linear fixture: drift x' = x of the unit-disk system
        sys = cfg("unit_disk").system
        X = VectorField(lambda p: sys.dynamics_batch(p[None], np.zeros((1, 2)))[0], 2)
        p0 = np.array([0.6, -0.3])
        exact = p0 * np.exp(1.0)
        errs = [np.linalg.norm(integrate(X, p0, 1.0, step=1.0 / k).end - exact) for k in (4, 8, 16, 32)]
        assert all(a / b >= 16 for a, b in zip(errs, errs[1:])), errs

        wrong = 0
        for _ in range(1000):
            d, G, z, dist = random_affine_instance(rng)
            res = span_solvability(constant_system(d, G), np.zeros(len(d)), z)
            if res.status is Status.INCONCLUSIVE:
                continue
            wrong += (res.status is Status.SOLVABLE) != rank_oracle(d, G, z)
        assert wrong == 0
