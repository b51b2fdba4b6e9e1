"""
polyalg.py

Sparse multivariate polynomials over the state variables of an ODE system
and optional parameter variables (r or rho when r is kept symbolic).

Responsibilities:
- VarSet: the ordered variable list a problem lives in.
- Poly: immutable map exponent-tuple -> coefficient, either exact
  (fractions.Fraction, no rounding ever) or float.
- Arithmetic, differentiation, the Lie derivative f . grad V, the symmetry
  (x, y) -> (-x, -y), evaluation and substitution.
- Text form used by certificate files, e.g. "3/8*x^2*y - 2*r*z^2".
  Parsing goes through sympy so parentheses and products are accepted.
"""

from __future__ import annotations

from fractions import Fraction
from itertools import combinations_with_replacement
from types import MappingProxyType
from typing import Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import sympy
from sympy.parsing.sympy_parser import (
    convert_xor,
    parse_expr,
    rationalize,
    standard_transformations,
)


Monomial = Tuple[int, ...]
Coeff = Union[Fraction, float]
CoeffMode = Literal["exact", "float"]
Scalar = Union[int, Fraction, float]

MAX_VARIABLES = 8
VALID_MODES = ("exact", "float")


class StructureError(ValueError):
    """Mismatched variable sets or modes, unknown variables, missing assignments."""


def as_rational(value: Union[Scalar, str]) -> Fraction:
    """
    Read a rational from an int, Fraction, "p/q" string or decimal.

    Floats are read through their shortest decimal repr, so 1e-9 becomes
    exactly 1/10^9. This is for configuration values, not for solver output.
    """
    if isinstance(value, bool):
        raise ValueError(f"Expected a rational number, got {value!r}")
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(repr(value))
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as e:
            raise ValueError(f"Cannot read '{value}' as a rational number.") from e
    raise ValueError(f"Expected a rational number, got {type(value).__name__}")


# -----------------------------
# Step 1: Variables and monomials
# -----------------------------

class VarSet:
    """
    Ordered state variables followed by ordered parameter variables.

    Exponent tuples index variables in this order, and graded lexicographic
    monomial order follows it too.
    """

    __slots__ = ("state_vars", "param_vars", "_index")

    def __init__(self, state_vars: Sequence[str], param_vars: Sequence[str] = ()) -> None:
        state = tuple(state_vars)
        params = tuple(param_vars)
        names = state + params
        if not state:
            raise StructureError("A VarSet needs at least one state variable.")
        if len(set(names)) != len(names):
            raise StructureError(f"Duplicate variable names in {names}")
        if len(names) > MAX_VARIABLES:
            raise StructureError(
                f"At most {MAX_VARIABLES} variables are supported, got {len(names)}"
            )
        for name in names:
            if not name.isidentifier():
                raise StructureError(f"Variable name '{name}' is not an identifier.")
        self.state_vars: Tuple[str, ...] = state
        self.param_vars: Tuple[str, ...] = params
        self._index = {name: i for i, name in enumerate(names)}

    @property
    def variables(self) -> Tuple[str, ...]:
        return self.state_vars + self.param_vars

    @property
    def n_state(self) -> int:
        return len(self.state_vars)

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise StructureError(
                f"Unknown variable '{name}'. Expected one of: {list(self.variables)}"
            ) from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VarSet):
            return NotImplemented
        return self.state_vars == other.state_vars and self.param_vars == other.param_vars

    def __hash__(self) -> int:
        return hash((self.state_vars, self.param_vars))

    def __repr__(self) -> str:
        return f"VarSet(state_vars={self.state_vars!r}, param_vars={self.param_vars!r})"

    def to_dict(self) -> Dict[str, List[str]]:
        return {"state_vars": list(self.state_vars), "param_vars": list(self.param_vars)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Sequence[str]]) -> "VarSet":
        return cls(data["state_vars"], data.get("param_vars", ()))


def grlex_key(m: Monomial) -> Tuple[int, Monomial]:
    return (sum(m), m)


def state_degree(m: Monomial, varset: VarSet) -> int:
    return sum(m[: varset.n_state])


def symmetry_parity(m: Monomial, varset: VarSet) -> int:
    """0 if the monomial is fixed by (x, y) -> (-x, -y), 1 if it changes sign."""
    return (m[varset.index("x")] + m[varset.index("y")]) % 2


def monomials_up_to(varset: VarSet, degree: int, min_degree: int = 0) -> List[Monomial]:
    """All exponent tuples with min_degree <= total degree <= degree, ascending grlex."""
    n = len(varset)
    out: List[Monomial] = []
    for d in range(min_degree, degree + 1):
        for combo in combinations_with_replacement(range(n), d):
            exps = [0] * n
            for i in combo:
                exps[i] += 1
            out.append(tuple(exps))
    return sorted(out, key=grlex_key)


def monomial_text(m: Monomial, varset: VarSet) -> str:
    """Parameters are written first, like coefficients: "r*z^2"."""
    n = varset.n_state
    order = list(zip(varset.param_vars, m[n:])) + list(zip(varset.state_vars, m[:n]))
    factors = []
    for name, e in order:
        if e == 1:
            factors.append(name)
        elif e > 1:
            factors.append(f"{name}^{e}")
    return "*".join(factors) if factors else "1"


# -----------------------------
# Step 2: The polynomial type
# -----------------------------

def _coerce(value: Scalar, mode: CoeffMode) -> Coeff:
    if mode == "exact":
        if isinstance(value, float):
            raise StructureError(
                "Float coefficient in exact mode; round explicitly before mixing modes."
            )
        return Fraction(value)
    return float(value)


class Poly:
    """Immutable sparse polynomial. Zero coefficients are never stored."""

    __slots__ = ("varset", "mode", "_terms")

    def __init__(
        self,
        varset: VarSet,
        terms: Optional[Mapping[Monomial, Scalar]] = None,
        mode: CoeffMode = "exact",
    ) -> None:
        if mode not in VALID_MODES:
            raise ValueError(f"Invalid coefficient mode '{mode}'. Expected one of: {VALID_MODES}")
        clean: Dict[Monomial, Coeff] = {}
        n = len(varset)
        for m, c in (terms or {}).items():
            m = tuple(int(e) for e in m)
            if len(m) != n or any(e < 0 for e in m):
                raise StructureError(f"Exponent vector {m} does not fit {varset}")
            c = _coerce(c, mode)
            if c != 0:
                clean[m] = c
        self.varset = varset
        self.mode: CoeffMode = mode
        self._terms = clean

    # constructors
    @classmethod
    def zero(cls, varset: VarSet, mode: CoeffMode = "exact") -> "Poly":
        return cls(varset, {}, mode)

    @classmethod
    def constant(cls, varset: VarSet, value: Scalar, mode: CoeffMode = "exact") -> "Poly":
        return cls(varset, {(0,) * len(varset): value}, mode)

    @classmethod
    def variable(cls, varset: VarSet, name: str, mode: CoeffMode = "exact") -> "Poly":
        exps = [0] * len(varset)
        exps[varset.index(name)] = 1
        return cls(varset, {tuple(exps): 1}, mode)

    @classmethod
    def monomial(
        cls, varset: VarSet, exps: Monomial, coeff: Scalar = 1, mode: CoeffMode = "exact"
    ) -> "Poly":
        return cls(varset, {tuple(exps): coeff}, mode)

    # inspection
    @property
    def terms(self) -> Mapping[Monomial, Coeff]:
        return MappingProxyType(self._terms)

    def items(self) -> List[Tuple[Monomial, Coeff]]:
        """Terms in descending grlex order."""
        return sorted(self._terms.items(), key=lambda kv: grlex_key(kv[0]), reverse=True)

    def monomials(self) -> List[Monomial]:
        return [m for m, _ in self.items()]

    def coefficient(self, m: Monomial) -> Coeff:
        return self._terms.get(tuple(m), Fraction(0) if self.mode == "exact" else 0.0)

    def is_zero(self) -> bool:
        return not self._terms

    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        return max((sum(m) for m in self._terms), default=-1)

    def state_degree(self) -> int:
        return max((state_degree(m, self.varset) for m in self._terms), default=-1)

    def is_param_only(self) -> bool:
        return all(state_degree(m, self.varset) == 0 for m in self._terms)

    def is_state_homogeneous(self) -> bool:
        return len({state_degree(m, self.varset) for m in self._terms}) <= 1

    def leading_monomial(self) -> Optional[Monomial]:
        if not self._terms:
            return None
        return max(self._terms, key=grlex_key)

    def __len__(self) -> int:
        return len(self._terms)

    # arithmetic
    def _check(self, other: "Poly") -> None:
        if self.varset != other.varset:
            raise StructureError(f"VarSet mismatch: {self.varset} vs {other.varset}")
        if self.mode != other.mode:
            raise StructureError(f"Coefficient mode mismatch: {self.mode} vs {other.mode}")

    def _lift(self, other: Union["Poly", Scalar]) -> "Poly":
        if isinstance(other, Poly):
            self._check(other)
            return other
        if isinstance(other, (int, Fraction, float)):
            return Poly.constant(self.varset, other, self.mode)
        return NotImplemented

    def __add__(self, other: Union["Poly", Scalar]) -> "Poly":
        other = self._lift(other)
        if other is NotImplemented:
            return NotImplemented
        out = dict(self._terms)
        for m, c in other._terms.items():
            out[m] = out.get(m, 0) + c
        return Poly(self.varset, out, self.mode)

    __radd__ = __add__

    def __neg__(self) -> "Poly":
        return Poly(self.varset, {m: -c for m, c in self._terms.items()}, self.mode)

    def __sub__(self, other: Union["Poly", Scalar]) -> "Poly":
        other = self._lift(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other: Scalar) -> "Poly":
        return (-self) + other

    def __mul__(self, other: Union["Poly", Scalar]) -> "Poly":
        if isinstance(other, (int, Fraction, float)) and not isinstance(other, bool):
            c = _coerce(other, self.mode)
            return Poly(self.varset, {m: v * c for m, v in self._terms.items()}, self.mode)
        if not isinstance(other, Poly):
            return NotImplemented
        self._check(other)
        out: Dict[Monomial, Coeff] = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                key = tuple(a + b for a, b in zip(m1, m2))
                out[key] = out.get(key, 0) + c1 * c2
        return Poly(self.varset, out, self.mode)

    __rmul__ = __mul__

    def __pow__(self, k: int) -> "Poly":
        if not isinstance(k, int) or k < 0:
            raise ValueError(f"Poly powers need a non-negative int, got {k!r}")
        out = Poly.constant(self.varset, 1, self.mode)
        base = self
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    def __eq__(self, other: object) -> bool:
        if isinstance(other, (int, Fraction, float)):
            if other == 0:
                return self.is_zero()
            m0 = (0,) * len(self.varset)
            return len(self._terms) == 1 and self._terms.get(m0) == other
        if not isinstance(other, Poly):
            return NotImplemented
        return (
            self.varset == other.varset
            and self.mode == other.mode
            and self._terms == other._terms
        )

    def __hash__(self) -> int:
        return hash((self.varset, self.mode, frozenset(self._terms.items())))

    def __repr__(self) -> str:
        return f"Poly({to_text(self)!r})"

    # conversions
    def to_float(self) -> "Poly":
        return Poly(self.varset, {m: float(c) for m, c in self._terms.items()}, "float")

    def with_varset(self, varset: VarSet) -> "Poly":
        """Re-home the polynomial into a larger (or reordered) VarSet by variable name."""
        moved: Dict[Monomial, Coeff] = {}
        for m, c in self._terms.items():
            exps = [0] * len(varset)
            for name, e in zip(self.varset.variables, m):
                if e:
                    exps[varset.index(name)] = e
            moved[tuple(exps)] = c
        return Poly(varset, moved, self.mode)


# -----------------------------
# Step 3: Operations
# -----------------------------

def add(p: Poly, q: Poly) -> Poly:
    p._check(q)
    return p + q


def mul(p: Poly, q: Poly) -> Poly:
    p._check(q)
    return p * q


def differentiate(p: Poly, v: str) -> Poly:
    i = p.varset.index(v)
    out: Dict[Monomial, Coeff] = {}
    for m, c in p.terms.items():
        e = m[i]
        if e == 0:
            continue
        dm = list(m)
        dm[i] = e - 1
        out[tuple(dm)] = c * e
    return Poly(p.varset, out, p.mode)


def lie_derivative(V: Poly, f: Sequence[Poly]) -> Poly:
    """f . grad V, the rate of change of V along trajectories of dx/dt = f(x)."""
    state = V.varset.state_vars
    if len(f) != len(state):
        raise StructureError(
            f"Vector field has {len(f)} components but there are {len(state)} state variables."
        )
    out = Poly.zero(V.varset, V.mode)
    for name, fi in zip(state, f):
        V._check(fi)
        dV = differentiate(V, name)
        if not dV.is_zero():
            out = out + fi * dV
    return out


def apply_symmetry(p: Poly) -> Poly:
    """Image of p under (x, y) -> (-x, -y)."""
    vs = p.varset
    if "x" not in vs or "y" not in vs:
        raise StructureError(f"Symmetry needs variables x and y, have {list(vs.variables)}")
    return Poly(
        vs,
        {m: (-c if symmetry_parity(m, vs) else c) for m, c in p.terms.items()},
        p.mode,
    )


def is_symmetric(p: Poly) -> bool:
    return apply_symmetry(p) == p


def is_antisymmetric(p: Poly) -> bool:
    return apply_symmetry(p) == -p


def evaluate(p: Poly, point: Mapping[str, object]):
    """
    Value of p at a point given as {variable name: number}.

    Exact polynomials evaluated at ints or Fractions give a Fraction; any float
    in the point (or a float polynomial) gives a float. Other number types
    (e.g. sympy algebraic numbers) go through their own arithmetic.
    """
    vs = p.varset
    used = {i for m in p.terms for i, e in enumerate(m) if e}
    missing = [vs.variables[i] for i in sorted(used) if vs.variables[i] not in point]
    if missing:
        raise StructureError(f"No value assigned to variable(s) {missing}")
    values = {i: point[vs.variables[i]] for i in used}
    use_float = p.mode == "float" or any(isinstance(v, float) for v in values.values())
    if use_float:
        fvals = {i: float(v) for i, v in values.items()}
        total = 0.0
        for m, c in p.terms.items():
            term = float(c)
            for i, e in enumerate(m):
                if e:
                    term *= fvals[i] ** e
            total += term
        return total
    total = Fraction(0)
    for m, c in p.terms.items():
        term = 1
        for i, e in enumerate(m):
            if e:
                term = term * values[i] ** e
        total = total + term * c
    return total


def substitute(
    p: Poly,
    mapping: Mapping[str, Union[Poly, Scalar]],
    target: Optional[VarSet] = None,
) -> Poly:
    """
    Replace variables by polynomials (or numbers) in a target VarSet.

    Variables without a replacement keep their name and must exist in the
    target VarSet, which defaults to the VarSet of the replacements (or p's).
    """
    for name in mapping:
        p.varset.index(name)
    if target is None:
        polys = [v for v in mapping.values() if isinstance(v, Poly)]
        target = polys[0].varset if polys else p.varset
    replacements: List[Poly] = []
    for name in p.varset.variables:
        if name in mapping:
            value = mapping[name]
            if isinstance(value, Poly):
                if value.varset != target:
                    raise StructureError(f"Replacement for '{name}' lives in {value.varset}, not {target}")
                if value.mode != p.mode:
                    raise StructureError(f"Replacement for '{name}' is {value.mode}, polynomial is {p.mode}")
                replacements.append(value)
            else:
                replacements.append(Poly.constant(target, value, p.mode))
        else:
            if name not in target:
                raise StructureError(f"Variable '{name}' has no replacement and is not in {target}")
            replacements.append(Poly.variable(target, name, p.mode))

    powers: Dict[Tuple[int, int], Poly] = {}

    def power(i: int, e: int) -> Poly:
        key = (i, e)
        if key not in powers:
            powers[key] = replacements[i] ** e
        return powers[key]

    out = Poly.zero(target, p.mode)
    for m, c in p.terms.items():
        term = Poly.constant(target, c, p.mode)
        for i, e in enumerate(m):
            if e:
                term = term * power(i, e)
        out = out + term
    return out


# -----------------------------
# Step 4: Text form
# -----------------------------

def _coeff_text(c: Coeff) -> str:
    return str(c) if isinstance(c, Fraction) else repr(float(c))


def to_text(p: Poly) -> str:
    """Deterministic text, descending grlex, readable back by parse_poly."""
    if p.is_zero():
        return "0"
    pieces: List[str] = []
    for k, (m, c) in enumerate(p.items()):
        negative = c < 0
        mag = -c if negative else c
        mono = monomial_text(m, p.varset)
        if mono == "1":
            body = _coeff_text(mag)
        elif mag == 1:
            body = mono
        else:
            body = f"{_coeff_text(mag)}*{mono}"
        if k == 0:
            pieces.append(f"-{body}" if negative else body)
        else:
            pieces.append(f" - {body}" if negative else f" + {body}")
    return "".join(pieces)


_TRANSFORMS = standard_transformations + (convert_xor, rationalize)


def parse_poly(text: str, varset: VarSet, mode: CoeffMode = "exact") -> Poly:
    """
    Read a polynomial such as "3/8*x^2*y - 2*r*z^2" or "(x - y)^2".

    Decimal literals are read as exact rationals; symbols outside the VarSet
    are rejected.
    """
    symbols = {name: sympy.Symbol(name) for name in varset.variables}
    try:
        expr = parse_expr(str(text), local_dict=dict(symbols), transformations=_TRANSFORMS)
    except Exception as e:
        raise StructureError(f"Cannot parse polynomial text {text!r}: {e}") from e
    extra = {str(s) for s in getattr(expr, "free_symbols", set())} - set(symbols)
    if extra:
        raise StructureError(
            f"Polynomial text {text!r} uses unknown variable(s) {sorted(extra)}; "
            f"expected only {list(varset.variables)}"
        )
    gens = [symbols[name] for name in varset.variables]
    try:
        sp = sympy.Poly(expr, *gens, domain="QQ")
    except Exception as e:
        raise StructureError(f"Text {text!r} is not a rational polynomial: {e}") from e
    terms: Dict[Monomial, Fraction] = {}
    for exps, c in sp.terms():
        c = sympy.Rational(c)
        terms[tuple(int(e) for e in exps)] = Fraction(int(c.p), int(c.q))
    poly = Poly(varset, terms, "exact")
    return poly if mode == "exact" else poly.to_float()


def to_sympy(p: Poly) -> "sympy.Expr":
    symbols = [sympy.Symbol(name) for name in p.varset.variables]
    expr = sympy.Integer(0)
    for m, c in p.terms.items():
        coeff = sympy.Rational(c.numerator, c.denominator) if isinstance(c, Fraction) else sympy.Float(c)
        term = coeff
        for s, e in zip(symbols, m):
            if e:
                term = term * s**e
        expr = expr + term
    return expr


def span_rank(polys: Iterable[Poly]) -> int:
    """Rank of the linear span of exact polynomials (used to check independence)."""
    pivots: Dict[Monomial, Dict[Monomial, Fraction]] = {}
    rank = 0
    for p in polys:
        row = {m: Fraction(c) for m, c in p.terms.items()}
        for pm in sorted(pivots, key=grlex_key, reverse=True):
            if pm in row:
                f = row[pm]
                for m, c in pivots[pm].items():
                    row[m] = row.get(m, Fraction(0)) - f * c
                    if row[m] == 0:
                        del row[m]
        if not row:
            continue
        lead = max(row, key=grlex_key)
        scale = row[lead]
        pivots[lead] = {m: c / scale for m, c in row.items()}
        rank += 1
    return rank
