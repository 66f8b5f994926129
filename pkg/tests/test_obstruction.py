import numpy as np
import pytest
from hypothesis import given, strategies as st

from cbflab.geometry import GeometryError, SafeSet
from cbflab.obstruction import (InadmissiblePerturbation, Outcome, PerturbationField, Status, Theorem,
                                UnsupportedInputSet, brockett_check, candidate_perturbations,
                                check_neighborhood_family, check_theorem3, classify_residual,
                                constrained_solvability, span_solvability, tol_solve)
from cbflab.system import Ball, Box, ControlAffineSystem, FinitePoints, FullSpace, GeneralSystem, Sphere
from conftest import BALL, DISK, unit_disk_system
from oracles import constant_system, random_affine_instance, rank_oracle

NONHOLONOMIC = ControlAffineSystem(3, 2, ("0", "0", "0"), (("1", "0", "x2"), ("0", "1", "-x1")))
SATELLITE = ControlAffineSystem(3, 2, ("0", "0", "0"), (("1", "0", "0"), ("0", "1", "0")))


def test_status_bands():
    z = np.array([3.0, 4.0])
    t = tol_solve(z)
    assert t == pytest.approx(6e-7)
    assert classify_residual(t, z) is Status.SOLVABLE
    assert classify_residual(2 * t, z) is Status.INCONCLUSIVE
    assert classify_residual(100 * t * 1.01, z) is Status.UNSOLVABLE
    assert classify_residual(100 * t * 1.01, z, converged=False) is Status.INCONCLUSIVE


@given(st.integers(0, 2 ** 32 - 1))
def test_span_solvability_agrees_with_rank_oracle(seed):
    d, G, z, dist = random_affine_instance(np.random.default_rng(seed))
    res = span_solvability(constant_system(d, G), np.zeros(len(d)), z)
    assert res.residual == pytest.approx(dist, abs=1e-9 * (1 + np.linalg.norm(z)))
    expected = Status.SOLVABLE if rank_oracle(d, G, z) else Status.UNSOLVABLE
    assert res.status is expected
    if expected is Status.SOLVABLE:
        np.testing.assert_allclose(d + G @ res.u, z, atol=1e-8 * (1 + np.linalg.norm(z)))


def test_constrained_solvability_by_input_set():
    p, z = np.array([0.2, -0.1]), np.array([1.0, 0.0])
    # x + u = z needs u = (0.8, 0.1)
    assert constrained_solvability(unit_disk_system(Ball(1.0, 2)), p, z).status is Status.SOLVABLE
    r = constrained_solvability(unit_disk_system(Ball(0.5, 2)), p, z)
    assert r.status is Status.UNSOLVABLE
    assert r.residual == pytest.approx(np.hypot(0.8, 0.1) - 0.5, abs=1e-7)
    sph = constrained_solvability(unit_disk_system(Sphere(1.0, 2)), np.zeros(2), np.zeros(2))
    assert sph.status is Status.UNSOLVABLE and sph.residual == pytest.approx(1.0, abs=1e-7)
    box = constrained_solvability(unit_disk_system(Box((0, 0), (0.5, 0.5))), p, z)
    assert box.residual == pytest.approx(np.hypot(0.3, 0.0), abs=1e-7)
    pts = constrained_solvability(unit_disk_system(FinitePoints(((0.8, 0.1), (0, 0)))), p, z)
    assert pts.status is Status.SOLVABLE


def test_general_system_constrained_search():
    sys = GeneralSystem(1, 1, ("u1^2 + 1",), Box((-1,), (1,)))
    assert constrained_solvability(sys, [0.0], [1.5]).status is Status.SOLVABLE
    r = constrained_solvability(sys, [0.0], [-1.0])
    assert r.status is Status.UNSOLVABLE and r.residual == pytest.approx(2.0, abs=1e-7)


def test_sphere_above_three_inputs_is_rejected():
    sys = ControlAffineSystem(4, 4, ("0",) * 4, tuple(tuple("1" if i == j else "0" for i in range(4))
                                                        for j in range(4)), Sphere(1.0, 4))
    with pytest.raises(UnsupportedInputSet):
        constrained_solvability(sys, np.zeros(4), np.zeros(4))


def disk(res=64):
    return SafeSet(DISK, [(-1.5, 1.5)] * 2, res)


def test_theorem3_sphere_inputs_violated():
    Z = PerturbationField("radial", ("x1", "x2"))
    v = check_theorem3(unit_disk_system(Sphere(1.0, 2)), disk(), Z)
    assert v.outcome is Outcome.VIOLATED
    # |x + u - x| = |u| = 1 for every pair
    assert v.residual_statistics["min"] >= 0.999
    assert Z.admissible is True


def test_theorem3_ball_inputs_not_violated():
    v = check_theorem3(unit_disk_system(Ball(1.0, 2)), disk(), PerturbationField("radial", ("x1", "x2")))
    assert v.outcome is Outcome.NOT_VIOLATED
    np.testing.assert_allclose(v.witness["u"], [0, 0], atol=1e-7)


def test_theorem3_rejects_inadmissible_perturbation():
    with pytest.raises(InadmissiblePerturbation) as info:
        check_theorem3(unit_disk_system(Ball(1.0, 2)), disk(32), PerturbationField("in", ("-x1", "-x2")))
    assert abs(np.linalg.norm(info.value.witness) - 1) < 1e-9


def test_theorem3_silent_on_zero_euler_characteristic():
    S = SafeSet("0.16 - (sqrt(x1^2 + x2^2) - 1)^2", [(-2.5, 2.5)] * 2, 64)
    v = check_theorem3(unit_disk_system(Sphere(1.0, 2)), S, PerturbationField("radial", ("x1", "x2")))
    assert v.outcome is Outcome.INCONCLUSIVE


def test_non_compact_set_is_rejected():
    S = SafeSet("x1", [(-1, 1)] * 2, 16)
    with pytest.raises(GeometryError, match="compact"):
        check_theorem3(unit_disk_system(Sphere(1.0, 2)), S, PerturbationField("zero", ("0", "0")))


def ball(res=32):
    return SafeSet(BALL, [(-1.5, 1.5)] * 3, res)


@pytest.mark.parametrize("theorem", [Theorem.COR1, Theorem.T5, Theorem.T4])
def test_satellite_family_residual_is_eps(theorem):
    Z = PerturbationField("vertical", ("0", "0", "eps"), "eps")
    v = check_neighborhood_family(SATELLITE, ball(), Z, theorem)
    assert v.outcome is Outcome.VIOLATED
    assert len(v.epsilon_ladder) == 10
    for rung in v.epsilon_ladder:
        assert abs(rung["min_residual"] - rung["eps"]) <= 1e-12
        assert abs(rung["max_residual"] - rung["eps"]) <= 1e-12


def test_satellite_horizontal_family_is_solvable():
    Z = PerturbationField("horizontal", ("eps", "0", "0"), "eps")
    v = check_neighborhood_family(SATELLITE, ball(), Z, Theorem.COR1)
    assert v.outcome is Outcome.NOT_VIOLATED
    assert len(v.epsilon_ladder) == 3


def test_family_check_validation():
    Zfam = PerturbationField("vertical", ("0", "0", "eps"), "eps")
    with pytest.raises(ValueError, match="vanish"):
        check_neighborhood_family(SATELLITE, ball(), PerturbationField("c", ("1", "0", "eps"), "eps"), "Cor1")
    with pytest.raises(ValueError, match="not a family"):
        check_neighborhood_family(SATELLITE, ball(), PerturbationField("z", ("0", "0", "0")), "Cor1")
    with pytest.raises(ValueError, match="Cor1 applies"):
        boxed = ControlAffineSystem(3, 2, SATELLITE.drift, SATELLITE.inputs, Ball(1.0, 2))
        check_neighborhood_family(boxed, ball(), Zfam, "Cor1")
    with pytest.raises(ValueError):
        check_neighborhood_family(SATELLITE, ball(), Zfam, "T3")


def test_unit_disk_axis_families_not_violated():
    # x + u = eps e_i has the solution u = eps e_i - x on the circle |u| = 1 for |x| near 1
    sys = unit_disk_system(Sphere(1.0, 2))
    S = disk()
    for Z in candidate_perturbations(S):
        if Z.name.startswith("eps_e"):
            v = check_neighborhood_family(sys, S, Z, Theorem.T5)
            assert v.outcome is Outcome.NOT_VIOLATED, Z.name


def test_candidate_perturbations():
    names = [Z.name for Z in candidate_perturbations(disk(32), {"radial": ["x1", "x2"]})]
    assert names == ["neg_grad_h_0.1", "neg_grad_h_1", "zero", "eps_e1", "eps_e2", "eps_radial"]


def test_nonholonomic_brockett_violated():
    v = brockett_check(NONHOLONOMIC, np.zeros(3))
    assert v.outcome is Outcome.VIOLATED
    d = np.abs(v.witness["direction"])
    np.testing.assert_array_equal(d, [0, 0, 1])
    # best achievable |F - r e3| over |x|_inf <= 1/4 is r / sqrt(1 + 1/8)
    np.testing.assert_allclose(v.witness["residual_over_radius"], 1 / np.sqrt(1.125), rtol=1e-6)
    # x2 d1 - x1 d2 = d3 has a solution in the state box iff |d3| <= (|d1| + |d2|) / 4
    for d in np.array(v.witness["all_directions"]):
        assert abs(d[2]) > (abs(d[0]) + abs(d[1])) / 4
    assert [0, 0, -1] in v.witness["all_directions"]


def test_brockett_holds_for_fully_actuated_system():
    full = ControlAffineSystem(3, 3, ("0",) * 3, tuple(tuple("1" if i == j else "0" for i in range(3))
                                                         for j in range(3)))
    v = brockett_check(full, np.zeros(3))
    assert v.outcome is Outcome.NOT_VIOLATED


def test_brockett_warns_for_non_equilibrium():
    shifted = ControlAffineSystem(3, 2, ("0", "0", "1"), NONHOLONOMIC.inputs)
    with pytest.warns(UserWarning, match="not an equilibrium"):
        brockett_check(shifted, np.zeros(3), rungs=2)


def test_verdicts_are_deterministic():
    Z = PerturbationField("radial", ("x1", "x2"))
    a = check_theorem3(unit_disk_system(Sphere(1.0, 2)), disk(32), Z, seed=3).to_dict()
    b = check_theorem3(unit_disk_system(Sphere(1.0, 2)), disk(32), Z, seed=3).to_dict()
    assert a == b
