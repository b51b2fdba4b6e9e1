import json
from fractions import Fraction

import numpy as np
import pytest
from pytest import mark
from scipy.linalg import LinAlgError

import sdpsolve
from polyalg import Poly, VarSet, parse_poly
from sdpsolve import SDPSolution, SolverSettings, UnscaleMap, rescale_problem, solve
from sosform import (
    AuxAnsatz,
    BasisPair,
    SDPConstraint,
    SDPInstance,
    assemble_gram_constraints,
    build_bound_poly,
    gen_basis_pair,
    gen_lorenz_V_basis,
    to_sdp,
)

XYZ = VarSet(("x", "y", "z"))
BETA = Fraction(8, 3)
SIGMA = Fraction(10)
R = Fraction(28)


def lorenz_field():
    x, y, z = (Poly.variable(XYZ, n) for n in ("x", "y", "z"))
    return (SIGMA * (y - x), R * x - y - x * z, x * y - BETA * z)


def bound_problem(phi_text, degree, sense="upper", bound=None):
    phi = parse_poly(phi_text, XYZ)
    ansatz = gen_lorenz_V_basis(degree)
    s = build_bound_poly(phi, lorenz_field(), ansatz, sense, bound)
    return assemble_gram_constraints(s, gen_basis_pair(s))


@pytest.fixture(scope="module")
def z_degree2():
    g = bound_problem("z", 2)
    inst = to_sdp(g)
    return g, inst, solve(inst)


def test_single_entry_problem():
    # X11 = 1 and u - X11 = 0, minimise u
    inst = SDPInstance(
        block_dims=(1,),
        block_labels=("s",),
        constraints=(
            SDPConstraint(blocks=(((0, 0, 1.0),),), free=(0.0,), rhs=1.0, degree=0),
            SDPConstraint(blocks=(((0, 0, -1.0),),), free=(1.0,), rhs=0.0, degree=0),
        ),
        free_names=("u",),
        objective=(1.0,),
    )
    sol = solve(inst)
    assert sol.usable
    assert sol.objective_value == pytest.approx(1.0, abs=1e-7)
    assert sol.block("s")[0, 0] == pytest.approx(1.0, abs=1e-7)


def test_degree_two_z_bound(z_degree2):
    _, _, sol = z_degree2
    assert sol.usable
    assert sol.objective_value / 27 == pytest.approx(1.0, abs=1e-4)


def test_final_iterate_respects_weak_duality(z_degree2):
    _, _, sol = z_degree2
    scale = 1 + abs(sol.primal_objective) + abs(sol.dual_objective)
    assert sol.primal_objective >= sol.dual_objective - 1e-6 * scale


def test_solution_reproduces_bound_polynomial(z_degree2):
    g, _, sol = z_degree2
    values = [sol.free_scalars[name] for name in g.free_names]
    for k, (label, i, j) in enumerate(g.gram_index):
        values.append(sol.block(label)[i, j])
    expanded = g.expand([Fraction(v) for v in values]).to_float()
    target = g.s_value([Fraction(v) for v in values]).to_float()
    diff = expanded - target
    assert max((abs(c) for c in diff.terms.values()), default=0.0) < 1e-5


def test_blocks_are_symmetric_and_psd(z_degree2):
    _, _, sol = z_degree2
    for block in sol.gram_blocks:
        assert np.allclose(block, block.T, atol=1e-14)
        assert np.linalg.eigvalsh(block).min() > -1e-7


def test_lower_bound_on_z_is_zero():
    sol = solve(to_sdp(bound_problem("z", 2, "lower")))
    assert sol.usable
    assert sol.objective_value == pytest.approx(0.0, abs=1e-4)


def test_rescaled_problem_gives_same_bound(z_degree2):
    _, inst, sol = z_degree2
    scaled, unscale = rescale_problem(inst, 20)
    assert scaled.state_scale == 20
    scaled_sol = solve(scaled)
    assert scaled_sol.usable
    assert scaled_sol.objective_value == pytest.approx(27 / 20, rel=1e-4)
    assert unscale.bound(scaled_sol.objective_value) == pytest.approx(sol.objective_value, rel=1e-5)
    back = unscale.solution(scaled_sol, inst.free_names)
    assert back.free_scalars["U"] == pytest.approx(sol.free_scalars["U"], rel=1e-4)


def test_rescale_identity_and_degree_count(z_degree2):
    _, inst, _ = z_degree2
    same, unscale = rescale_problem(inst, 1)
    assert same is inst
    assert unscale.is_identity
    assert unscale.bound(3.5) == 3.5
    cubic = UnscaleMap(Fraction(20), target_degree=3)
    assert cubic.bound(1.0) == 8000.0
    assert cubic.bound(Fraction(1, 8000)) == 1
    with pytest.raises(ValueError):
        rescale_problem(inst, 0)


def test_feasibility_problem_with_sharp_bound():
    g = bound_problem("z", 2, bound=27)
    inst = to_sdp(g)
    assert inst.feasibility
    sol = solve(inst)
    assert sol.status in ("optimal", "marginal")
    assert sol.objective_value > -1e-6


def test_feasibility_problem_with_too_small_bound():
    inst = to_sdp(bound_problem("z", 2, bound=20))
    sol = solve(inst)
    assert sol.status == "infeasible"
    assert sol.objective_value < 0


def test_structurally_infeasible_instance():
    phi = parse_poly("-1", XYZ)
    s = build_bound_poly(phi, lorenz_field(), AuxAnsatz.empty(), "lower", 0)
    g = assemble_gram_constraints(s, BasisPair(XYZ, (), ()), strict=False)
    sol = solve(to_sdp(g))
    assert sol.status == "infeasible"
    assert not sol.usable


def test_iteration_limit_is_a_numerical_failure(z_degree2):
    _, inst, _ = z_degree2
    sol = solve(inst, SolverSettings(max_iterations=2))
    assert sol.status == "numerical-failure"
    assert sol.iterations == 2
    assert len(sol.trace) == 3


@mark.parametrize(
    "kwargs",
    [{"gap_tolerance": 0}, {"feasibility_tolerance": -1e-9}, {"step_fraction": 1.0}, {"max_iterations": 0}],
)
def test_settings_validation(kwargs):
    with pytest.raises(ValueError):
        SolverSettings(**kwargs)


def test_settings_from_config():
    settings = SolverSettings.from_config({"gap_tolerance": "1e-8", "max_iterations": 50})
    assert settings.gap_tolerance == 1e-8
    assert settings.max_iterations == 50
    with pytest.raises(ValueError):
        SolverSettings.from_config({"tolerance": 1e-8})


def test_solution_record_reads_back(z_degree2):
    _, _, sol = z_degree2
    record = json.loads(json.dumps(sol.to_record()))
    again = SDPSolution.from_record(record)
    assert again.status == sol.status
    assert again.objective_value == sol.objective_value
    assert np.array_equal(again.block("s"), sol.block("s"))
    assert again.free_scalars == sol.free_scalars


def _failing_newton_step(*args, **kwargs):
    raise LinAlgError("singular Schur complement")


def test_stall_far_from_optimum_is_a_numerical_failure(z_degree2, monkeypatch):
    _, inst, _ = z_degree2
    monkeypatch.setattr(sdpsolve, "_newton_step", _failing_newton_step)
    sol = solve(inst)
    assert sol.status == "numerical-failure"
    assert not sol.usable
    assert "linear algebra failure" in sol.reason


def test_stall_within_stall_tolerance_is_marginal(z_degree2, monkeypatch):
    _, inst, _ = z_degree2
    monkeypatch.setattr(sdpsolve, "_newton_step", _failing_newton_step)
    sol = solve(inst, SolverSettings(stall_tolerance=1e6))
    assert sol.status == "marginal"
    assert "best iterate 0 accepted" in sol.reason
