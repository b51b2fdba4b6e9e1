"""
sosform.py

From a bounding question to a semidefinite program.

Responsibilities:
- Build the bound polynomial S from (phi, f, auxiliary ansatz, bound ansatz):
    lower sense:  S = phi - L + f . grad V
    upper sense:  S = -(phi - U + f . grad V)
  S is kept as a constant part plus one polynomial per unknown, so its
  coefficients are affine in (c_i, bound unknowns).
- Generate basis vectors split by the (x, y) -> (-x, -y) symmetry, and reduce
  them on loci where S must vanish.
- Match S against b_s^T Q_s b_s + b_a^T Q_a b_a coefficient by coefficient
  (exact rational arithmetic) and hand the result to the solver as an
  SDPInstance with one PSD block per non-empty basis.
- Read/write problem.json.

Does NOT solve anything; see sdpsolve.py.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

from polyalg import (
    Monomial,
    Poly,
    StructureError,
    VarSet,
    grlex_key,
    is_antisymmetric,
    is_symmetric,
    lie_derivative,
    monomial_text,
    monomials_up_to,
    parse_poly,
    span_rank,
    state_degree,
    substitute,
    symmetry_parity,
)


logger = logging.getLogger(__name__)

Sense = Literal["lower", "upper"]
VALID_SENSES = ("lower", "upper")
VALID_V_DEGREES = (2, 4, 6, 8, 10)
BLOCK_LABELS = ("s", "a")


class InfeasibleStructureError(ValueError):
    """S has a monomial no choice of Gram entries and coefficients can produce."""

    def __init__(self, monomial: Monomial, varset: VarSet, detail: str = "unrepresentable") -> None:
        self.monomial = tuple(monomial)
        self.text = monomial_text(self.monomial, varset)
        super().__init__(f"{detail} monomial {self.text} in the bound polynomial")


def validate_sense(sense: str) -> Sense:
    if sense not in VALID_SENSES:
        raise ValueError(f"Invalid sense '{sense}'. Expected one of: {list(VALID_SENSES)}")
    return sense  # type: ignore[return-value]


# -----------------------------
# Step 1: Exact sparse row reduction
# -----------------------------

Row = Dict[int, Fraction]


@dataclass
class Echelon:
    """
    Reduced row echelon form of a sparse exact system, built row by row.

    pivots maps a pivot column to (row, rhs) where the row holds the pivot
    (coefficient 1) and free columns only.
    """

    priority: Dict[int, int]
    pivots: Dict[int, Tuple[Row, Fraction]] = field(default_factory=dict)
    origin: Dict[int, int] = field(default_factory=dict)
    independent: List[int] = field(default_factory=list)
    inconsistent: List[int] = field(default_factory=list)

    def add(self, row: Mapping[int, Fraction], rhs: Fraction, tag: int) -> None:
        work: Row = {c: Fraction(v) for c, v in row.items() if v != 0}
        rhs = Fraction(rhs)
        for col in [c for c in work if c in self.pivots]:
            factor = work.get(col)
            if not factor:
                continue
            prow, prhs = self.pivots[col]
            for c, v in prow.items():
                nv = work.get(c, Fraction(0)) - factor * v
                if nv:
                    work[c] = nv
                else:
                    work.pop(c, None)
            rhs -= factor * prhs
        if not work:
            if rhs != 0:
                self.inconsistent.append(tag)
            return
        pivot = min(work, key=lambda c: self.priority.get(c, len(self.priority) + c))
        scale = work[pivot]
        work = {c: v / scale for c, v in work.items()}
        rhs = rhs / scale
        for col, (prow, prhs) in list(self.pivots.items()):
            factor = prow.get(pivot)
            if not factor:
                continue
            for c, v in work.items():
                nv = prow.get(c, Fraction(0)) - factor * v
                if nv:
                    prow[c] = nv
                else:
                    prow.pop(c, None)
            self.pivots[col] = (prow, prhs - factor * rhs)
        self.pivots[pivot] = (work, rhs)
        self.origin[pivot] = tag
        self.independent.append(tag)

    @property
    def rank(self) -> int:
        return len(self.pivots)

    def solve(self, free_values: Mapping[int, Fraction]) -> Dict[int, Fraction]:
        """Pivot values given values for the free columns (missing ones count as 0)."""
        out: Dict[int, Fraction] = {}
        for col, (row, rhs) in self.pivots.items():
            value = rhs
            for c, v in row.items():
                if c != col:
                    value -= v * free_values.get(c, Fraction(0))
            out[col] = value
        return out

    def nullspace(self, n_cols: int) -> List[Row]:
        """Basis of the homogeneous solution space, one vector per free column."""
        free = [c for c in range(n_cols) if c not in self.pivots]
        basis: List[Row] = []
        for f in free:
            vec: Row = {f: Fraction(1)}
            for col, (row, _) in self.pivots.items():
                if f in row:
                    vec[col] = -row[f]
            basis.append(vec)
        return basis


def row_reduce(
    rows: Sequence[Mapping[int, Fraction]],
    rhs: Sequence[Fraction],
    priority: Sequence[int],
) -> Echelon:
    """Columns earlier in `priority` become pivots first."""
    ech = Echelon(priority={c: k for k, c in enumerate(priority)})
    for tag, (row, b) in enumerate(zip(rows, rhs)):
        ech.add(row, b, tag)
    return ech


# -----------------------------
# Step 2: Ansatz types and the bound polynomial
# -----------------------------

@dataclass(frozen=True)
class AuxAnsatz:
    basis_polys: Tuple[Poly, ...]
    coeff_symbols: Tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "basis_polys", tuple(self.basis_polys))
        object.__setattr__(self, "coeff_symbols", tuple(self.coeff_symbols))
        if len(self.basis_polys) != len(self.coeff_symbols):
            raise ValueError(
                f"{len(self.basis_polys)} basis polynomials but {len(self.coeff_symbols)} coefficient symbols"
            )
        if len(set(self.coeff_symbols)) != len(self.coeff_symbols):
            raise ValueError(f"Duplicate coefficient symbols: {self.coeff_symbols}")
        if self.basis_polys:
            vs = self.basis_polys[0].varset
            for p in self.basis_polys:
                if p.varset != vs or p.mode != "exact":
                    raise StructureError("Ansatz polynomials must be exact and share one VarSet.")
            if span_rank(self.basis_polys) != len(self.basis_polys):
                raise ValueError("Ansatz polynomials are linearly dependent.")

    @classmethod
    def empty(cls) -> "AuxAnsatz":
        return cls((), ())

    def __len__(self) -> int:
        return len(self.basis_polys)

    def assemble(self, coeffs: Mapping[str, Fraction], varset: VarSet) -> Poly:
        """V = sum_i c_i V_i."""
        V = Poly.zero(varset)
        for name, p in zip(self.coeff_symbols, self.basis_polys):
            V = V + p * Fraction(coeffs[name])
        return V


@dataclass(frozen=True)
class BoundAnsatz:
    """
    The bound as a polynomial in the parameter variables: a known part plus
    unknown multiples of fixed parameter polynomials (e.g. U = rho^4 + u0).
    """

    known: Poly
    unknowns: Tuple[Tuple[str, Poly], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "unknowns", tuple(self.unknowns))
        for p in [self.known] + [q for _, q in self.unknowns]:
            if p.varset != self.known.varset or p.mode != "exact":
                raise StructureError("Bound ansatz polynomials must be exact and share one VarSet.")
            if not p.is_param_only():
                raise StructureError(f"Bound ansatz term {p} depends on state variables.")

    @classmethod
    def free(cls, varset: VarSet, name: str = "U") -> "BoundAnsatz":
        return cls(Poly.zero(varset), ((name, Poly.constant(varset, 1)),))

    @classmethod
    def fixed(cls, value: Union[Poly, int, Fraction], varset: VarSet) -> "BoundAnsatz":
        poly = value if isinstance(value, Poly) else Poly.constant(varset, value)
        return cls(poly)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self.unknowns)

    def value(self, values: Mapping[str, Fraction]) -> Poly:
        out = self.known
        for name, p in self.unknowns:
            out = out + p * Fraction(values[name])
        return out


@dataclass(frozen=True)
class SFunction:
    """S = constant + sum over unknowns u of u * parts[u]."""

    varset: VarSet
    sense: Sense
    constant: Poly
    parts: Tuple[Tuple[str, Poly], ...]
    aux_names: Tuple[str, ...]
    bound_names: Tuple[str, ...]
    phi: Poly
    ansatz: AuxAnsatz
    bound: BoundAnsatz
    field: Tuple[Poly, ...] = ()

    @property
    def unknowns(self) -> Tuple[str, ...]:
        return self.aux_names + self.bound_names

    def part(self, name: str) -> Poly:
        for n, p in self.parts:
            if n == name:
                return p
        raise KeyError(f"Unknown '{name}' not in {self.unknowns}")

    def support(self) -> List[Monomial]:
        mons = set(self.constant.terms)
        for _, p in self.parts:
            mons.update(p.terms)
        return sorted(mons, key=grlex_key)

    def degree(self) -> int:
        return max([self.constant.degree()] + [p.degree() for _, p in self.parts])

    def substitute(self, values: Mapping[str, Fraction]) -> Poly:
        out = self.constant
        for name, p in self.parts:
            out = out + p * Fraction(values[name])
        return out

    def coefficient(self, m: Monomial) -> Dict[str, Fraction]:
        """Affine coefficient of a monomial: {"": constant, unknown: multiplier}."""
        out: Dict[str, Fraction] = {}
        c = self.constant.coefficient(m)
        if c:
            out[""] = c
        for name, p in self.parts:
            c = p.coefficient(m)
            if c:
                out[name] = c
        return out


def build_bound_poly(
    phi: Poly,
    f: Sequence[Poly],
    ansatz: AuxAnsatz,
    sense: str,
    bound_ansatz: Union[BoundAnsatz, Poly, int, Fraction, None] = None,
) -> SFunction:
    sense = validate_sense(sense)
    vs = phi.varset
    if phi.mode != "exact":
        raise StructureError("phi must be an exact polynomial.")
    for fi in f:
        if fi.varset != vs:
            raise StructureError(f"phi lives in {vs} but the vector field in {fi.varset}")
    for p in ansatz.basis_polys:
        if p.varset != vs:
            raise StructureError(f"Ansatz polynomial {p} is not in {vs}")

    if bound_ansatz is None:
        bound = BoundAnsatz.free(vs, "U" if sense == "upper" else "L")
    elif isinstance(bound_ansatz, BoundAnsatz):
        bound = bound_ansatz
    else:
        bound = BoundAnsatz.fixed(bound_ansatz, vs)
    if bound.known.varset != vs:
        raise StructureError(f"Bound ansatz lives in {bound.known.varset}, not {vs}")
    clash = set(bound.names) & set(ansatz.coeff_symbols)
    if clash:
        raise ValueError(f"Bound unknowns clash with ansatz symbols: {sorted(clash)}")

    sign = 1 if sense == "lower" else -1
    constant = (phi - bound.known) * sign
    parts: List[Tuple[str, Poly]] = []
    for name, V in zip(ansatz.coeff_symbols, ansatz.basis_polys):
        parts.append((name, lie_derivative(V, f) * sign))
    for name, P in bound.unknowns:
        parts.append((name, P * (-sign)))

    s = SFunction(
        varset=vs,
        sense=sense,
        constant=constant,
        parts=tuple(parts),
        aux_names=ansatz.coeff_symbols,
        bound_names=bound.names,
        phi=phi,
        ansatz=ansatz,
        bound=bound,
        field=tuple(f),
    )
    logger.debug("built %s-sense S of degree %d with %d unknowns", sense, s.degree(), len(parts))
    return s


def gen_lorenz_V_basis(degree: int, include_r: bool = False, param: str = "r") -> AuxAnsatz:
    """
    Symmetric V terms for the Lorenz system up to `degree`.

    Lower-degree terms are all monomials with x, y exponents of even sum (and
    some state dependence). Top-degree terms are restricted to
    x^p (y^2 + z^2)^q, or r^s x^p (y^2 + z^2 - 2 r z)^q when r is a variable,
    so that f . grad V does not exceed degree(V).
    """
    if degree not in VALID_V_DEGREES:
        raise ValueError(f"V degree must be one of {VALID_V_DEGREES}, got {degree}")
    vs = VarSet(("x", "y", "z"), (param,) if include_r else ())

    def lower_key(m: Monomial):
        return (sum(m), tuple(-e for e in m))

    lower = [
        m
        for m in monomials_up_to(vs, degree - 1, min_degree=1)
        if symmetry_parity(m, vs) == 0 and state_degree(m, vs) > 0
    ]
    polys: List[Poly] = [Poly.monomial(vs, m) for m in sorted(lower, key=lower_key)]

    x = Poly.variable(vs, "x")
    yz = parse_poly("y^2 + z^2", vs)
    if include_r:
        rv = Poly.variable(vs, param)
        yz = yz - 2 * rv * Poly.variable(vs, "z")
    for s in range(0, degree + 1 if include_r else 1):
        rest = degree - s
        for p in range(rest, -1, -1):
            if p % 2 or (rest - p) % 2:
                continue
            q = (rest - p) // 2
            if p == 0 and q == 0:
                continue
            term = x**p * yz**q
            if s:
                term = term * rv**s
            polys.append(term)

    symbols = tuple(f"c{i + 1}" for i in range(len(polys)))
    return AuxAnsatz(tuple(polys), symbols)


# -----------------------------
# Step 3: Basis vectors
# -----------------------------

@dataclass(frozen=True)
class BasisPair:
    varset: VarSet
    b_s: Tuple[Poly, ...]
    b_a: Tuple[Poly, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "b_s", tuple(self.b_s))
        object.__setattr__(self, "b_a", tuple(self.b_a))
        for p in self.b_s:
            if p.varset != self.varset or not is_symmetric(p):
                raise StructureError(f"b_s element {p} is not symmetric in {self.varset}")
        for p in self.b_a:
            if p.varset != self.varset or not is_antisymmetric(p):
                raise StructureError(f"b_a element {p} is not antisymmetric in {self.varset}")

    def blocks(self) -> Tuple[Tuple[str, Tuple[Poly, ...]], ...]:
        return (("s", self.b_s), ("a", self.b_a))

    def block(self, label: str) -> Tuple[Poly, ...]:
        if label not in BLOCK_LABELS:
            raise ValueError(f"Invalid block '{label}'. Expected one of: {list(BLOCK_LABELS)}")
        return self.b_s if label == "s" else self.b_a

    def is_monomial(self) -> bool:
        return all(len(p) == 1 for p in self.b_s + self.b_a)


def _basis_order(m: Monomial) -> Tuple:
    return (sum(m), tuple(-e for e in m))


def gen_basis_pair(s: SFunction) -> BasisPair:
    """
    Monomials of degree <= deg(S)/2 that can carry a Gram diagonal entry.

    A monomial m is dropped when 2m is not in the support of S and is not the
    sum of two other distinct kept monomials: its diagonal entry would be
    forced to zero, and with it the whole row of a PSD matrix. Repeated until
    nothing changes.
    """
    vs = s.varset
    support = set(s.support())
    half = max(s.degree(), 0) // 2
    kept = set(monomials_up_to(vs, half))

    def doubled(m: Monomial) -> Monomial:
        return tuple(2 * e for e in m)

    changed = True
    while changed:
        changed = False
        for m in sorted(kept, key=grlex_key):
            target = doubled(m)
            if target in support:
                continue
            cross = False
            for a in kept:
                if a == m:
                    continue
                b = tuple(t - e for t, e in zip(target, a))
                if min(b) >= 0 and b in kept and b != a:
                    cross = True
                    break
            if not cross:
                kept.discard(m)
                changed = True

    ordered = sorted(kept, key=_basis_order)
    b_s = tuple(Poly.monomial(vs, m) for m in ordered if symmetry_parity(m, vs) == 0)
    b_a = tuple(Poly.monomial(vs, m) for m in ordered if symmetry_parity(m, vs) == 1)
    logger.debug("basis pair: %d symmetric, %d antisymmetric", len(b_s), len(b_a))
    return BasisPair(vs, b_s, b_a)


Locus = Mapping[str, Union[Poly, int, Fraction, str]]


def _locus_polys(locus: Locus, vs: VarSet) -> Dict[str, Poly]:
    out: Dict[str, Poly] = {}
    for name, value in locus.items():
        vs.index(name)
        if isinstance(value, Poly):
            if value.varset != vs:
                raise StructureError(f"Locus value for '{name}' is not in {vs}")
            out[name] = value
        elif isinstance(value, str):
            out[name] = parse_poly(value, vs)
        else:
            out[name] = Poly.constant(vs, value)
    return out


def _normalized(p: Poly) -> Poly:
    lead = p.leading_monomial()
    if lead is None:
        return p
    return p * (Fraction(1) / p.coefficient(lead))


def _vanishing_combinations(elements: Sequence[Poly], loci: Sequence[Dict[str, Poly]]) -> List[Poly]:
    rows: Dict[Monomial, Row] = {}
    for locus in loci:
        for i, e in enumerate(elements):
            for m, c in substitute(e, locus).terms.items():
                row = rows.setdefault(m, {})
                row[i] = row.get(i, Fraction(0)) + c
    monos = sorted(rows, key=grlex_key)
    ech = row_reduce([rows[m] for m in monos], [Fraction(0)] * len(monos), range(len(elements)))
    out: List[Poly] = []
    vs = elements[0].varset
    for vec in ech.nullspace(len(elements)):
        p = Poly.zero(vs)
        for i, v in vec.items():
            p = p + elements[i] * v
        out.append(_normalized(p))
    return out


def _merge_along(elements: Sequence[Poly], vector: Sequence[Union[int, Fraction, str]]) -> List[Poly]:
    """
    Replace k elements by k-1 combinations spanning the complement of a Gram
    null vector v: with p the last index where v is nonzero, element i becomes
    v_i * e_p - v_p * e_i and e_p is dropped.
    """
    v = [Fraction(c) for c in vector]
    if len(v) != len(elements):
        raise ValueError(f"Null vector has {len(v)} entries but the block has {len(elements)} elements")
    nonzero = [i for i, c in enumerate(v) if c != 0]
    if not nonzero:
        raise ValueError("Null vector must be nonzero.")
    p = nonzero[-1]
    out: List[Poly] = []
    for i, e in enumerate(elements):
        if i == p:
            continue
        if v[i] == 0:
            out.append(e)
        else:
            out.append(_normalized(elements[p] * v[i] - e * v[p]))
    return out


def reduce_basis(
    pair: BasisPair,
    vanish_sets: Sequence[Locus] = (),
    extra_null_vectors: Sequence[Tuple[str, Sequence[Union[int, Fraction, str]]]] = (),
) -> BasisPair:
    """
    Shrink a basis so every element vanishes on the given loci, then merge
    elements along caller-supplied Gram null vectors.

    Each locus is a dict of simultaneous substitutions such as
    {"z": "rho", "x": "y"}. Null vectors are (block, vector) pairs whose
    coordinates refer to the basis after the locus step.
    """
    vs = pair.varset
    loci = [_locus_polys(locus, vs) for locus in vanish_sets]
    blocks = {"s": list(pair.b_s), "a": list(pair.b_a)}

    if loci:
        for label in BLOCK_LABELS:
            if blocks[label]:
                blocks[label] = _vanishing_combinations(blocks[label], loci)

    for label, vector in extra_null_vectors:
        if label not in BLOCK_LABELS:
            raise ValueError(f"Invalid block '{label}'. Expected one of: {list(BLOCK_LABELS)}")
        blocks[label] = _merge_along(blocks[label], vector)

    for label in BLOCK_LABELS:
        for e in blocks[label]:
            for locus in loci:
                if not substitute(e, locus).is_zero():
                    raise StructureError(f"Reduced basis element {e} does not vanish on {locus}")
    return BasisPair(vs, tuple(blocks["s"]), tuple(blocks["a"]))


def quadratic_form(basis: BasisPair, blocks: Mapping[str, Sequence[Sequence]], mode: str = "exact") -> Poly:
    """b_s^T Q_s b_s + b_a^T Q_a b_a for explicit Gram blocks."""
    out = Poly.zero(basis.varset, mode)  # type: ignore[arg-type]
    for label, elems in basis.blocks():
        if not elems:
            continue
        Q = blocks[label]
        if len(Q) != len(elems):
            raise ValueError(f"Block '{label}' is {len(Q)}x{len(Q)} but the basis has {len(elems)} elements")
        polys = elems if mode == "exact" else tuple(e.to_float() for e in elems)
        for i in range(len(polys)):
            for j in range(i, len(polys)):
                q = Q[i][j] if mode == "exact" else float(Q[i][j])
                if q == 0:
                    continue
                w = 1 if i == j else 2
                out = out + polys[i] * polys[j] * (q * w)
    return out


# -----------------------------
# Step 4: Coefficient matching
# -----------------------------

@dataclass(frozen=True)
class CoefficientMatch:
    """sum_c coeffs[c] * unknown[c] = rhs for one monomial of S."""

    monomial: Monomial
    coeffs: Tuple[Tuple[int, Fraction], ...]
    rhs: Fraction

    def as_row(self) -> Row:
        return dict(self.coeffs)


def gram_column_name(label: str, i: int, j: int) -> str:
    return f"Q{label}[{i},{j}]"


@dataclass(frozen=True)
class GramProblem:
    s: SFunction
    basis: BasisPair
    columns: Tuple[str, ...]
    gram_index: Tuple[Tuple[str, int, int], ...]
    equations: Tuple[CoefficientMatch, ...]
    independent: Tuple[int, ...]
    objective: Optional[Tuple[str, Sense]]
    fixed: Tuple[Tuple[str, Fraction], ...] = ()
    unrepresentable: Tuple[Monomial, ...] = ()
    inconsistent: Tuple[Monomial, ...] = ()

    @property
    def varset(self) -> VarSet:
        return self.s.varset

    @property
    def free_names(self) -> Tuple[str, ...]:
        """Scalar unknowns (ansatz coefficients then bound unknowns) still in play."""
        n = len(self.columns) - len(self.gram_index)
        return self.columns[:n]

    @property
    def n_free(self) -> int:
        return len(self.columns) - len(self.gram_index)

    @property
    def structurally_infeasible(self) -> bool:
        return bool(self.unrepresentable or self.inconsistent)

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise KeyError(f"Unknown column '{name}'") from None

    def gram_column(self, label: str, i: int, j: int) -> int:
        if i > j:
            i, j = j, i
        return self.n_free + self.gram_index.index((label, i, j))

    def echelon(self, priority: Optional[Sequence[int]] = None) -> Echelon:
        order = list(priority) if priority is not None else list(range(len(self.columns)))
        return row_reduce(
            [eq.as_row() for eq in self.equations],
            [eq.rhs for eq in self.equations],
            order,
        )

    def determined_values(self) -> Dict[str, Fraction]:
        """Unknowns the equations pin down regardless of the remaining freedom."""
        ech = self.echelon()
        out: Dict[str, Fraction] = {}
        for col, (row, rhs) in ech.pivots.items():
            if len(row) == 1:
                out[self.columns[col]] = rhs
        return out

    def with_fixed(self, values: Mapping[str, Fraction]) -> "GramProblem":
        """Move known scalar unknowns (e.g. a chosen bound) to the right-hand side."""
        values = {k: Fraction(v) for k, v in values.items()}
        for name in values:
            if name not in self.free_names:
                raise KeyError(f"Cannot fix '{name}'; free scalars are {list(self.free_names)}")
        keep = [k for k, name in enumerate(self.columns) if name not in values]
        remap = {old: new for new, old in enumerate(keep)}
        fixed_cols = {self.column_index(name): v for name, v in values.items()}
        equations = []
        for eq in self.equations:
            rhs = eq.rhs
            coeffs = []
            for c, v in eq.coeffs:
                if c in fixed_cols:
                    rhs -= v * fixed_cols[c]
                else:
                    coeffs.append((remap[c], v))
            equations.append(CoefficientMatch(eq.monomial, tuple(coeffs), rhs))
        objective = self.objective
        if objective is not None and objective[0] in values:
            objective = None
        trimmed = GramProblem(
            s=self.s,
            basis=self.basis,
            columns=tuple(self.columns[k] for k in keep),
            gram_index=self.gram_index,
            equations=tuple(equations),
            independent=(),
            objective=objective,
            fixed=self.fixed + tuple(sorted(values.items())),
        )
        return _with_rank_info(trimmed, strict=False)

    def all_fixed(self) -> Dict[str, Fraction]:
        return dict(self.fixed)

    def gram_blocks(self, values: Sequence) -> Dict[str, List[List]]:
        """Symmetric Gram blocks from a full column assignment (indexed like columns)."""
        out: Dict[str, List[List]] = {}
        for label, elems in self.basis.blocks():
            n = len(elems)
            out[label] = [[0] * n for _ in range(n)]
        for k, (label, i, j) in enumerate(self.gram_index):
            v = values[self.n_free + k]
            out[label][i][j] = v
            out[label][j][i] = v
        return out

    def expand(self, values: Sequence[Fraction]) -> Poly:
        return quadratic_form(self.basis, self.gram_blocks(values))

    def s_value(self, values: Sequence[Fraction]) -> Poly:
        named = dict(self.fixed)
        named.update({name: values[k] for k, name in enumerate(self.free_names)})
        return self.s.substitute(named)


def _with_rank_info(g: GramProblem, strict: bool) -> GramProblem:
    ech = g.echelon()
    inconsistent = tuple(g.equations[t].monomial for t in ech.inconsistent)
    unrepresentable = tuple(
        eq.monomial for eq in g.equations if not eq.coeffs and eq.rhs != 0
    )
    inconsistent = tuple(m for m in inconsistent if m not in unrepresentable)
    if strict and unrepresentable:
        raise InfeasibleStructureError(unrepresentable[0], g.varset)
    if strict and inconsistent:
        raise InfeasibleStructureError(inconsistent[0], g.varset, "inconsistent match at")
    return GramProblem(
        s=g.s,
        basis=g.basis,
        columns=g.columns,
        gram_index=g.gram_index,
        equations=g.equations,
        independent=tuple(sorted(ech.independent)),
        objective=g.objective,
        fixed=g.fixed,
        unrepresentable=unrepresentable,
        inconsistent=inconsistent,
    )


def assemble_gram_constraints(s: SFunction, basis: BasisPair, strict: bool = True) -> GramProblem:
    """
    One equation per monomial of S - (b_s^T Q_s b_s + b_a^T Q_a b_a) == 0.

    Gram unknowns are the upper-triangle entries of each block (off-diagonal
    entries enter twice). With strict=False an unrepresentable monomial is
    recorded instead of raised, so to_sdp can report structural infeasibility.
    """
    if basis.varset != s.varset:
        raise StructureError(f"Basis lives in {basis.varset}, S in {s.varset}")
    free_names = s.unknowns
    gram_index: List[Tuple[str, int, int]] = []
    for label, elems in basis.blocks():
        for i in range(len(elems)):
            for j in range(i, len(elems)):
                gram_index.append((label, i, j))
    n_free = len(free_names)
    columns = tuple(free_names) + tuple(gram_column_name(*key) for key in gram_index)

    rows: Dict[Monomial, Row] = {}

    def bump(m: Monomial, col: int, value: Fraction) -> None:
        row = rows.setdefault(m, {})
        row[col] = row.get(col, Fraction(0)) + value

    for k, (label, i, j) in enumerate(gram_index):
        elems = basis.block(label)
        weight = 1 if i == j else 2
        for m, c in (elems[i] * elems[j]).terms.items():
            bump(m, n_free + k, c * weight)
    for k, name in enumerate(free_names):
        for m, c in s.part(name).terms.items():
            bump(m, k, -c)
    for m in s.constant.terms:
        rows.setdefault(m, {})

    equations = []
    for m in sorted(rows, key=grlex_key):
        coeffs = tuple(sorted((c, v) for c, v in rows[m].items() if v != 0))
        equations.append(CoefficientMatch(m, coeffs, Fraction(s.constant.coefficient(m))))

    objective: Optional[Tuple[str, Sense]] = None
    if s.bound_names:
        objective = (s.bound_names[0], s.sense)

    g = GramProblem(
        s=s,
        basis=basis,
        columns=columns,
        gram_index=tuple(gram_index),
        equations=tuple(equations),
        independent=(),
        objective=objective,
    )
    g = _with_rank_info(g, strict)
    logger.info(
        "gram problem: %d equations (%d independent), %d unknowns",
        len(g.equations), len(g.independent), len(g.columns),
    )
    return g


# -----------------------------
# Step 5: SDP instance
# -----------------------------

SparseEntries = Tuple[Tuple[int, int, float], ...]


@dataclass(frozen=True)
class SDPConstraint:
    """
    sum_b <A_b, X_b> + free . w = rhs, with A_b symmetric and stored as
    upper-triangle entries (i <= j, value A_b[i][j]).
    """

    blocks: Tuple[SparseEntries, ...]
    free: Tuple[float, ...]
    rhs: float
    degree: int


@dataclass(frozen=True)
class SDPInstance:
    """
    Block-diagonal SDP in equality form:

        minimize    objective . w
        subject to  sum_b <A_kb, X_b> + G_k . w = rhs_k,   X_b PSD

    The bound in the caller's sense is objective_sign * (objective . w). With
    feasibility=True there is nothing to optimise and the solver maximises
    the smallest eigenvalue of the blocks instead.
    """

    block_dims: Tuple[int, ...]
    block_labels: Tuple[str, ...]
    constraints: Tuple[SDPConstraint, ...]
    free_names: Tuple[str, ...]
    objective: Tuple[float, ...]
    objective_sign: int = 1
    feasibility: bool = False
    free_degrees: Tuple[Optional[int], ...] = ()
    block_degrees: Tuple[Tuple[Optional[int], ...], ...] = ()
    target_degree: Optional[int] = None
    state_scale: float = 1.0
    structurally_infeasible: bool = False
    reason: str = ""

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    def to_record(self) -> Dict:
        return {
            "record_type": "problem",
            "block_dims": list(self.block_dims),
            "block_labels": list(self.block_labels),
            "free_names": list(self.free_names),
            "objective": list(self.objective),
            "objective_sign": self.objective_sign,
            "feasibility": self.feasibility,
            "free_degrees": list(self.free_degrees),
            "block_degrees": [list(b) for b in self.block_degrees],
            "target_degree": self.target_degree,
            "state_scale": self.state_scale,
            "structurally_infeasible": self.structurally_infeasible,
            "reason": self.reason,
            "constraints": [
                {
                    "blocks": [[list(e) for e in entries] for entries in c.blocks],
                    "free": list(c.free),
                    "rhs": c.rhs,
                    "degree": c.degree,
                }
                for c in self.constraints
            ],
        }

    @classmethod
    def from_record(cls, data: Mapping) -> "SDPInstance":
        if data.get("record_type") != "problem":
            raise ValueError(f"Not a problem record (record_type={data.get('record_type')!r})")
        constraints = tuple(
            SDPConstraint(
                blocks=tuple(
                    tuple((int(i), int(j), float(v)) for i, j, v in entries) for entries in c["blocks"]
                ),
                free=tuple(float(v) for v in c["free"]),
                rhs=float(c["rhs"]),
                degree=int(c["degree"]),
            )
            for c in data["constraints"]
        )
        return cls(
            block_dims=tuple(int(n) for n in data["block_dims"]),
            block_labels=tuple(data["block_labels"]),
            constraints=constraints,
            free_names=tuple(data["free_names"]),
            objective=tuple(float(v) for v in data["objective"]),
            objective_sign=int(data.get("objective_sign", 1)),
            feasibility=bool(data.get("feasibility", False)),
            free_degrees=tuple(data.get("free_degrees", ())),
            block_degrees=tuple(tuple(b) for b in data.get("block_degrees", ())),
            target_degree=data.get("target_degree"),
            state_scale=float(data.get("state_scale", 1.0)),
            structurally_infeasible=bool(data.get("structurally_infeasible", False)),
            reason=str(data.get("reason", "")),
        )


def _homogeneous_degree(p: Poly) -> Optional[int]:
    if p.is_zero():
        return 0
    return p.state_degree() if p.is_state_homogeneous() else None


def to_sdp(g: GramProblem) -> SDPInstance:
    labels = tuple(label for label, elems in g.basis.blocks() if elems)
    dims = tuple(len(g.basis.block(label)) for label in labels)
    free_names = g.free_names
    n_free = g.n_free

    if g.structurally_infeasible:
        bad = (g.unrepresentable + g.inconsistent)[0]
        reason = f"monomial {monomial_text(bad, g.varset)} cannot be matched"
        logger.info("structurally infeasible: %s", reason)
        return SDPInstance(
            block_dims=dims,
            block_labels=labels,
            constraints=(),
            free_names=free_names,
            objective=(0.0,) * n_free,
            feasibility=g.objective is None,
            structurally_infeasible=True,
            reason=reason,
        )

    block_pos = {label: k for k, label in enumerate(labels)}
    constraints: List[SDPConstraint] = []
    for t in g.independent:
        eq = g.equations[t]
        entries: List[List[Tuple[int, int, float]]] = [[] for _ in labels]
        free = [0.0] * n_free
        for col, v in eq.coeffs:
            if col < n_free:
                free[col] = float(v)
                continue
            label, i, j = g.gram_index[col - n_free]
            value = float(v) if i == j else float(v) / 2.0
            entries[block_pos[label]].append((i, j, value))
        constraints.append(
            SDPConstraint(
                blocks=tuple(tuple(sorted(e)) for e in entries),
                free=tuple(free),
                rhs=float(eq.rhs),
                degree=state_degree(eq.monomial, g.varset),
            )
        )

    objective = [0.0] * n_free
    sign = 1
    feasibility = g.objective is None
    if not feasibility:
        name, sense = g.objective
        col = free_names.index(name)
        if not any(c.free[col] != 0 for c in constraints):
            raise ValueError(f"Objective unknown '{name}' does not appear in any constraint.")
        sign = 1 if sense == "upper" else -1
        objective[col] = float(sign)

    degrees: Dict[str, Optional[int]] = {}
    for name, V in zip(g.s.ansatz.coeff_symbols, g.s.ansatz.basis_polys):
        degrees[name] = _homogeneous_degree(V)
    for name in g.s.bound_names:
        degrees[name] = 0
    block_degrees = tuple(
        tuple(_homogeneous_degree(e) for e in g.basis.block(label)) for label in labels
    )

    inst = SDPInstance(
        block_dims=dims,
        block_labels=labels,
        constraints=tuple(constraints),
        free_names=free_names,
        objective=tuple(objective),
        objective_sign=sign,
        feasibility=feasibility,
        free_degrees=tuple(degrees[name] for name in free_names),
        block_degrees=block_degrees,
        target_degree=_homogeneous_degree(g.s.phi),
    )
    logger.info("sdp: blocks %s, %d constraints, %d free scalars", dims, len(constraints), n_free)
    return inst


def dump_problem(inst: SDPInstance, path: Path) -> Path:
    from utils import write_report

    return write_report(path, inst.to_record())


def load_problem(path: Path) -> SDPInstance:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Problem file not found at {p}.")
    with p.open("r", encoding="utf-8") as f:
        return SDPInstance.from_record(json.load(f))
