import json
from fractions import Fraction

import pytest
from pytest import mark

from polyalg import Poly, VarSet, is_symmetric, lie_derivative, parse_poly, span_rank
from sosform import (
    AuxAnsatz,
    BasisPair,
    BoundAnsatz,
    InfeasibleStructureError,
    SDPInstance,
    assemble_gram_constraints,
    build_bound_poly,
    gen_basis_pair,
    gen_lorenz_V_basis,
    quadratic_form,
    reduce_basis,
    row_reduce,
    to_sdp,
)

XYZ = VarSet(("x", "y", "z"))
XYZR = VarSet(("x", "y", "z"), ("r",))
XYZRHO = VarSet(("x", "y", "z"), ("rho",))

BETA = Fraction(8, 3)
SIGMA = Fraction(10)


def P(text, vs=XYZ):
    return parse_poly(text, vs)


def field(vs, beta=BETA, sigma=SIGMA, r=None):
    x, y, z = (Poly.variable(vs, n) for n in ("x", "y", "z"))
    if r is None:
        r = Poly.variable(vs, vs.param_vars[0])
        if vs.param_vars[0] == "rho":
            r = r + 1
    return (sigma * (y - x), r * x - y - x * z, x * y - beta * z)


def z2_problem(beta=BETA, sigma=SIGMA):
    vs = XYZR
    ansatz = AuxAnsatz(
        (P("z", vs), P("x^2", vs), P("y^2 + z^2 - 2*r*z", vs)),
        ("c1", "c2", "c3"),
    )
    bound = BoundAnsatz.fixed(P("(r - 1)^2", vs), vs)
    return build_bound_poly(P("z^2", vs), field(vs, beta, sigma), ansatz, "upper", bound)


def z3_problem(beta=BETA, sigma=SIGMA):
    vs = XYZRHO
    V1 = (
        P("x^4", vs) * (1 / sigma)
        + P("(y^2 + z^2 - 2*rho*z)^2 + 8*rho^2*(y^2 + z^2 - 2*rho*z)", vs)
        + P("rho^2*x^2", vs) * (6 / sigma)
    )
    V2 = -P("rho", vs) * (P("x", vs) * (1 / sigma) + P("y", vs)) ** 2
    ansatz = AuxAnsatz((V1, V2), ("c1", "c2"))
    bound = BoundAnsatz.fixed(P("rho^4", vs), vs)
    return build_bound_poly(P("rho*z^3", vs), field(vs, beta, sigma), ansatz, "upper", bound)


def z3_reduced_basis():
    vs = XYZRHO
    return BasisPair(
        vs,
        (P("x^2 - x*y", vs), P("x^2 - y^2", vs), P("(z - rho)^2", vs)),
        (P("rho*(x - y)", vs), P("x*(z - rho)", vs), P("y*(z - rho)", vs)),
    )


# -----------------------------
# Row reduction
# -----------------------------

def test_row_reduce_solves_and_flags_inconsistency():
    F = Fraction
    # a + b = 3, a - b = 1, 2a = 4 (redundant), 0 = 1 (inconsistent)
    rows = [{0: F(1), 1: F(1)}, {0: F(1), 1: F(-1)}, {0: F(2)}, {}]
    ech = row_reduce(rows, [F(3), F(1), F(4), F(1)], [0, 1])
    assert ech.rank == 2
    assert ech.independent == [0, 1]
    assert ech.inconsistent == [3]
    assert ech.solve({}) == {0: F(2), 1: F(1)}


def test_nullspace_vectors_are_homogeneous_solutions():
    F = Fraction
    rows = [{0: F(1), 1: F(2), 2: F(3)}]
    ech = row_reduce(rows, [F(0)], [0, 1, 2])
    basis = ech.nullspace(3)
    assert len(basis) == 2
    for vec in basis:
        assert sum(rows[0].get(c, 0) * v for c, v in vec.items()) == 0


# -----------------------------
# Bound polynomial
# -----------------------------

def test_z2_coefficient_of_z_squared():
    s = z2_problem()
    assert s.coefficient((0, 0, 2, 0)) == {"": -1, "c3": 2 * BETA}


def test_lower_sense_with_fixed_auxiliary_function():
    ansatz = AuxAnsatz((P("x^2"),), ("c1",))
    s = build_bound_poly(P("x*y"), field(XYZ, r=28), ansatz, "lower", 0)
    assert s.substitute({"c1": -1 / (2 * SIGMA)}) == P("x^2")


def test_no_auxiliary_function():
    s = build_bound_poly(P("x^2"), field(XYZ, r=28), AuxAnsatz.empty(), "lower", 0)
    assert s.substitute({}) == P("x^2")
    assert s.unknowns == ()


def test_free_bound_is_named_by_sense():
    f = field(XYZ, r=28)
    assert build_bound_poly(P("z"), f, AuxAnsatz.empty(), "upper").bound_names == ("U",)
    assert build_bound_poly(P("z"), f, AuxAnsatz.empty(), "lower").bound_names == ("L",)


def test_bound_poly_rejects_foreign_varset():
    with pytest.raises(ValueError):
        build_bound_poly(P("z", XYZR), field(XYZ, r=28), AuxAnsatz.empty(), "upper")
    with pytest.raises(ValueError):
        build_bound_poly(P("z"), field(XYZ, r=28), AuxAnsatz.empty(), "sideways")


def test_ansatz_validation():
    with pytest.raises(ValueError):
        AuxAnsatz((P("x"), P("2*x")), ("c1", "c2"))
    with pytest.raises(ValueError):
        AuxAnsatz((P("x"), P("y")), ("c1", "c1"))
    with pytest.raises(ValueError):
        AuxAnsatz((P("x"),), ("c1", "c2"))


# -----------------------------
# V bases
# -----------------------------

def test_degree_two_basis():
    ansatz = gen_lorenz_V_basis(2)
    assert set(ansatz.basis_polys) == {P("z"), P("x^2"), P("y^2 + z^2")}
    assert ansatz.coeff_symbols == ("c1", "c2", "c3")


def test_degree_four_basis():
    ansatz = gen_lorenz_V_basis(4)
    expected = {
        P(t)
        for t in (
            "z", "x^2", "x*y", "y^2", "z^2", "x^2*z", "x*y*z", "y^2*z", "z^3",
            "x^4", "x^2*(y^2 + z^2)", "(y^2 + z^2)^2",
        )
    }
    assert len(ansatz) == 12
    assert set(ansatz.basis_polys) == expected


def test_degree_two_basis_with_r():
    ansatz = gen_lorenz_V_basis(2, include_r=True)
    assert set(ansatz.basis_polys) == {P("z", XYZR), P("x^2", XYZR), P("y^2 + z^2 - 2*r*z", XYZR)}


@mark.parametrize("degree", [1, 3, 12, 0])
def test_bad_V_degree(degree):
    with pytest.raises(ValueError):
        gen_lorenz_V_basis(degree)


@mark.parametrize("degree, include_r", [(4, False), (6, False), (4, True)])
def test_V_basis_is_symmetric_and_keeps_degree(degree, include_r):
    ansatz = gen_lorenz_V_basis(degree, include_r=include_r)
    vs = ansatz.basis_polys[0].varset
    f = field(vs) if include_r else field(vs, r=28)
    for V in ansatz.basis_polys:
        assert is_symmetric(V)
        assert lie_derivative(V, f).degree() <= degree


# -----------------------------
# Basis vectors
# -----------------------------

def test_basis_pair_for_z2_problem():
    pair = gen_basis_pair(z2_problem())
    assert set(pair.b_s) == {P("1", XYZR), P("r", XYZR), P("z", XYZR)}
    assert set(pair.b_a) == {P("x", XYZR), P("y", XYZR)}


def test_basis_pair_for_z3_problem():
    pair = gen_basis_pair(z3_problem())
    vs = XYZRHO
    assert set(pair.b_s) == {P(t, vs) for t in ("x^2", "x*y", "y^2", "rho^2", "rho*z", "z^2")}
    assert set(pair.b_a) == {P(t, vs) for t in ("rho*x", "rho*y", "x*z", "y*z")}


def test_basis_pair_for_single_square():
    s = build_bound_poly(P("x^2"), field(XYZ, r=28), AuxAnsatz.empty(), "lower", 0)
    pair = gen_basis_pair(s)
    assert pair.b_s == ()
    assert pair.b_a == (P("x"),)


def test_basis_pair_rejects_wrong_parity():
    with pytest.raises(ValueError):
        BasisPair(XYZ, (P("x"),), ())


def test_reduce_z2_basis_on_equilibrium_locus():
    pair = gen_basis_pair(z2_problem())
    reduced = reduce_basis(pair, [{"z": "r - 1", "x": "y"}])
    assert reduced.b_s == (P("z - r + 1", XYZR),)
    assert reduced.b_a == (P("x - y", XYZR),)


def test_reduce_z3_basis_on_locus_spans_expected_space():
    vs = XYZRHO
    pair = gen_basis_pair(z3_problem())
    reduced = reduce_basis(pair, [{"z": "rho", "x": "y"}])
    expected_s = [P(t, vs) for t in ("x^2 - x*y", "x^2 - y^2", "rho*(z - rho)", "z*(z - rho)")]
    expected_a = [P(t, vs) for t in ("rho*(x - y)", "x*(z - rho)", "y*(z - rho)")]
    assert len(reduced.b_s) == 4
    assert len(reduced.b_a) == 3
    assert span_rank(list(reduced.b_s) + expected_s) == 4
    assert span_rank(list(reduced.b_a) + expected_a) == 3


def test_merge_along_null_vector():
    vs = XYZRHO
    pair = BasisPair(
        vs,
        tuple(P(t, vs) for t in ("x^2 - x*y", "x^2 - y^2", "rho*(z - rho)", "z*(z - rho)")),
        z3_reduced_basis().b_a,
    )
    merged = reduce_basis(pair, extra_null_vectors=[("s", [0, 0, 1, 1])])
    assert merged == z3_reduced_basis()


def test_reduce_basis_identity_and_errors():
    pair = gen_basis_pair(z2_problem())
    assert reduce_basis(pair) == pair
    with pytest.raises(ValueError):
        reduce_basis(pair, [{"w": 0}])
    with pytest.raises(ValueError):
        reduce_basis(pair, extra_null_vectors=[("s", [1, 0])])


def test_quadratic_form_has_no_cross_block_terms():
    vs = XYZRHO
    basis = z3_reduced_basis()
    blocks = {
        "s": [[1, 2, 3], [2, 5, 7], [3, 7, 11]],
        "a": [[2, -1, 0], [-1, 3, 4], [0, 4, 9]],
    }
    assert is_symmetric(quadratic_form(basis, blocks))
    assert quadratic_form(basis, {"s": [[0] * 3] * 3, "a": [[0] * 3] * 3}) == Poly.zero(vs)


# -----------------------------
# Coefficient matching
# -----------------------------

def test_z2_gram_problem_is_fully_determined():
    s = z2_problem()
    basis = reduce_basis(gen_basis_pair(s), [{"z": "r - 1", "x": "y"}])
    g = assemble_gram_constraints(s, basis)
    values = g.determined_values()
    assert len(g.independent) == 5
    assert values == {
        "c1": 2 / BETA,
        "c2": 1 / (BETA * SIGMA),
        "c3": 1 / BETA,
        "Qs[0,0]": 1,
        "Qa[0,0]": 2 / BETA,
    }
    ordered = [values[name] for name in g.columns]
    assert g.expand(ordered) == g.s_value(ordered)


@mark.parametrize("beta, sigma", [(Fraction(8, 3), 10), (1, 1), (4, 2)])
def test_z2_certificate_values_hold_for_other_parameters(beta, sigma):
    beta, sigma = Fraction(beta), Fraction(sigma)
    s = z2_problem(beta, sigma)
    basis = reduce_basis(gen_basis_pair(s), [{"z": "r - 1", "x": "y"}])
    values = assemble_gram_constraints(s, basis).determined_values()
    assert values["Qs[0,0]"] == 1
    assert values["Qa[0,0]"] == 2 / beta


def test_z3_gram_problem_fixes_auxiliary_coefficients():
    g = assemble_gram_constraints(z3_problem(), z3_reduced_basis())
    assert len(g.independent) == 12
    assert g.objective is None
    values = g.determined_values()
    assert values["c1"] == 1 / (4 * BETA)
    assert values["c2"] == SIGMA / (2 * (1 + SIGMA))


def test_z3_explicit_gram_matrices_satisfy_the_match():
    F = Fraction
    g = assemble_gram_constraints(z3_problem(), z3_reduced_basis())
    Qs = [[F(3, 8), F(-3, 16), F(3, 16)], [F(-3, 16), F(3, 8), F(-1, 2)], [F(3, 16), F(-1, 2), F(1)]]
    Qa = [[F(9, 8), F(-1, 22), F(-1, 2)], [F(-1, 22), F(5, 8), F(0)], [F(-1, 2), F(0), F(3, 8)]]
    values = [F(0)] * len(g.columns)
    values[g.column_index("c1")] = F(3, 32)
    values[g.column_index("c2")] = F(5, 11)
    for label, Q in (("s", Qs), ("a", Qa)):
        for i in range(3):
            for j in range(i, 3):
                values[g.gram_column(label, i, j)] = Q[i][j]
    assert g.expand(values) == g.s_value(values)
    for eq in g.equations:
        assert sum(v * values[c] for c, v in eq.coeffs) == eq.rhs


def test_single_square_gives_one_equation():
    s = build_bound_poly(P("x^2"), field(XYZ, r=28), AuxAnsatz.empty(), "lower", 0)
    g = assemble_gram_constraints(s, BasisPair(XYZ, (), (P("x"),)))
    assert len(g.equations) == 1
    assert g.determined_values() == {"Qa[0,0]": 1}


def test_unrepresentable_monomial_is_named():
    s = build_bound_poly(P("-1"), field(XYZ, r=28), AuxAnsatz.empty(), "lower", 0)
    with pytest.raises(InfeasibleStructureError) as err:
        assemble_gram_constraints(s, BasisPair(XYZ, (), ()))
    assert err.value.text == "1"


def test_fixing_a_bound_moves_it_to_the_right_hand_side():
    vs = XYZR
    ansatz = AuxAnsatz((P("z", vs), P("x^2", vs), P("y^2 + z^2 - 2*r*z", vs)), ("c1", "c2", "c3"))
    bound = BoundAnsatz(P("(r - 1)^2", vs), (("u0", Poly.constant(vs, 1)),))
    s = build_bound_poly(P("z^2", vs), field(vs), ansatz, "upper", bound)
    basis = reduce_basis(gen_basis_pair(s), [{"z": "r - 1", "x": "y"}])
    g = assemble_gram_constraints(s, basis)
    assert g.objective == ("u0", "upper")
    fixed = g.with_fixed({"u0": 0})
    assert "u0" not in fixed.columns
    assert fixed.objective is None
    assert fixed.determined_values()["Qs[0,0]"] == 1


# -----------------------------
# SDP instance
# -----------------------------

def test_to_sdp_shapes_for_z2_problem():
    vs = XYZR
    ansatz = AuxAnsatz((P("z", vs), P("x^2", vs), P("y^2 + z^2 - 2*r*z", vs)), ("c1", "c2", "c3"))
    bound = BoundAnsatz(P("(r - 1)^2", vs), (("u0", Poly.constant(vs, 1)),))
    s = build_bound_poly(P("z^2", vs), field(vs), ansatz, "upper", bound)
    g = assemble_gram_constraints(s, gen_basis_pair(s))
    inst = to_sdp(g)
    assert inst.block_labels == ("s", "a")
    assert inst.block_dims == (3, 2)
    assert inst.free_names == ("c1", "c2", "c3", "u0")
    assert inst.objective == (0.0, 0.0, 0.0, 1.0)
    assert inst.n_constraints == len(g.independent)
    assert not inst.feasibility


def test_lower_sense_objective_is_negated():
    ansatz = gen_lorenz_V_basis(2)
    s = build_bound_poly(P("z"), field(XYZ, r=28), ansatz, "lower")
    inst = to_sdp(assemble_gram_constraints(s, gen_basis_pair(s)))
    assert inst.objective_sign == -1
    assert inst.objective[inst.free_names.index("L")] == -1.0


def test_structurally_infeasible_toy():
    s = build_bound_poly(P("-1"), field(XYZ, r=28), AuxAnsatz.empty(), "lower", 0)
    g = assemble_gram_constraints(s, BasisPair(XYZ, (), ()), strict=False)
    inst = to_sdp(g)
    assert inst.structurally_infeasible
    assert "1" in inst.reason


def test_degrees_recorded_for_rescaling():
    ansatz = gen_lorenz_V_basis(2)
    s = build_bound_poly(P("z"), field(XYZ, r=28), ansatz, "upper")
    inst = to_sdp(assemble_gram_constraints(s, gen_basis_pair(s)))
    assert inst.target_degree == 1
    assert inst.free_degrees == (1, 2, 2, 0)
    assert all(d is not None for block in inst.block_degrees for d in block)


def test_problem_record_reads_back():
    ansatz = gen_lorenz_V_basis(2)
    s = build_bound_poly(P("z"), field(XYZ, r=28), ansatz, "upper")
    inst = to_sdp(assemble_gram_constraints(s, gen_basis_pair(s)))
    record = json.loads(json.dumps(inst.to_record()))
    assert SDPInstance.from_record(record) == inst
    with pytest.raises(ValueError):
        SDPInstance.from_record({"record_type": "solution"})
