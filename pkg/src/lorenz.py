"""
lorenz.py

Everything specific to the Lorenz system

    dx/dt = sigma (y - x),  dy/dt = r x - y - x z,  dz/dt = x y - beta z.

Responsibilities:
- Parameters, vector field (optionally rescaled x -> s x'), equilibria.
- Symmetric moments x^l y^m z^n: parsing, values at the nonzero equilibria,
  normalisation, the standard moment suites.
- Exact relations between mean moments (proportional families and the
  twelve-row relation table chained down to a six-moment minimal set).
- Built-in analytic certificates (z2, z3, xy3) and their parameter regions.
- The (gamma1, gamma2) search deciding where the z3 certificate exists.
- moment_problem: the GramProblem for bounding one moment with V of a given degree.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from scipy.optimize import minimize

from certify import RationalCertificate, check_psd_exact
from polyalg import Poly, VarSet, as_rational, lie_derivative, parse_poly, to_text
from sosform import (
    AuxAnsatz,
    BasisPair,
    GramProblem,
    assemble_gram_constraints,
    build_bound_poly,
    gen_basis_pair,
    gen_lorenz_V_basis,
    validate_sense,
)


logger = logging.getLogger(__name__)

STATE_VARS = ("x", "y", "z")
VALID_PARAMS = ("r", "rho")
BUILTIN_CERTIFICATES = ("z2", "z3", "xy3")
DEFAULT_Z3_WITNESS = (Fraction(0), Fraction(3, 8))

Number = Union[Fraction, int, str, float]


class RegionViolation(ValueError):
    """A built-in certificate was requested outside the parameters where it exists."""

    def __init__(self, condition: str, detail: str = "") -> None:
        self.condition = condition
        super().__init__(f"condition {condition} violated{': ' + detail if detail else ''}")


class InternalConsistencyError(AssertionError):
    """A relation that should hold identically does not."""


# -----------------------------
# Step 1: Parameters and dynamics
# -----------------------------

@dataclass(frozen=True)
class LorenzParams:
    beta: Fraction = Fraction(8, 3)
    sigma: Fraction = Fraction(10)
    r: Optional[Fraction] = Fraction(28)      # None: r is a polynomial variable

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", as_rational(self.beta))
        object.__setattr__(self, "sigma", as_rational(self.sigma))
        if self.r is not None:
            object.__setattr__(self, "r", as_rational(self.r))
        if self.sigma == 0:
            raise ValueError("sigma must be nonzero.")

    @classmethod
    def from_config(cls, block: Optional[Mapping] = None) -> "LorenzParams":
        block = dict(block or {})
        accepted = ["beta", "sigma", "r"]
        unknown = sorted(set(block) - set(accepted))
        if unknown:
            raise ValueError(f"Unknown system settings {unknown}. Expected one of: {accepted}")
        r = block.get("r", Fraction(28))
        return cls(
            beta=block.get("beta", Fraction(8, 3)),
            sigma=block.get("sigma", Fraction(10)),
            r=None if r in (None, "symbolic") else r,
        )

    @property
    def symbolic(self) -> bool:
        return self.r is None

    def to_dict(self) -> Dict[str, str]:
        return {
            "beta": str(self.beta),
            "sigma": str(self.sigma),
            "r": "symbolic" if self.r is None else str(self.r),
        }


def lorenz_varset(p: LorenzParams, param: str = "r") -> VarSet:
    if param not in VALID_PARAMS:
        raise ValueError(f"Invalid parameter variable '{param}'. Expected one of: {list(VALID_PARAMS)}")
    return VarSet(STATE_VARS, (param,) if p.symbolic else ())


def vector_field(p: LorenzParams, state_scale: Number = 1, param: str = "r") -> Tuple[Poly, Poly, Poly]:
    """
    Exact vector field. With state_scale s the field is written for x = s x',
    i.e. dx'/dt = f(s x') / s. For symbolic r the parameter variable is r, or
    rho with r = rho + 1.
    """
    vs = lorenz_varset(p, param)
    s = as_rational(state_scale)
    if s <= 0:
        raise ValueError(f"state_scale must be > 0, got {state_scale}")
    x, y, z = (Poly.variable(vs, n) for n in STATE_VARS)
    if p.symbolic:
        r = Poly.variable(vs, param)
        if param == "rho":
            r = r + 1
    else:
        r = Poly.constant(vs, p.r)
    return (
        (y - x) * p.sigma,
        r * x - y - x * z * s,
        x * y * s - z * p.beta,
    )


def equilibria(p: LorenzParams) -> List[Tuple[float, float, float]]:
    """Origin, plus x+ and x- when beta (r - 1) > 0."""
    if p.symbolic:
        raise ValueError("equilibria need a numeric r.")
    points = [(0.0, 0.0, 0.0)]
    q = p.beta * (p.r - 1)
    if q > 0:
        a = math.sqrt(q)
        z = float(p.r - 1)
        points += [(a, a, z), (-a, -a, z)]
    return points


# -----------------------------
# Step 2: Moments
# -----------------------------

_MOMENT_TOKEN = re.compile(r"([xyz])(?:\^?(\d+))?")


@dataclass(frozen=True, order=True)
class MomentSpec:
    l: int
    m: int
    n: int

    def __post_init__(self) -> None:
        for e in (self.l, self.m, self.n):
            if int(e) != e or e < 0:
                raise ValueError(f"Moment exponents must be non-negative integers, got {(self.l, self.m, self.n)}")
        if self.degree == 0:
            raise ValueError("The constant moment is not a moment.")

    @classmethod
    def parse(cls, text: str) -> "MomentSpec":
        return parse_moment(text)

    @property
    def degree(self) -> int:
        return self.l + self.m + self.n

    @property
    def symmetric(self) -> bool:
        return (self.l + self.m) % 2 == 0

    @property
    def name(self) -> str:
        """Compact form used in keys and file names, e.g. x2z."""
        out = ""
        for v, e in zip(STATE_VARS, (self.l, self.m, self.n)):
            if e:
                out += v if e == 1 else f"{v}{e}"
        return out

    @property
    def exponents(self) -> Tuple[int, int, int]:
        return (self.l, self.m, self.n)

    def poly(self, varset: VarSet) -> Poly:
        return Poly.monomial(varset, self.exponents + (0,) * (len(varset) - 3))

    def __str__(self) -> str:
        return self.name


def parse_moment(text: str) -> MomentSpec:
    """Read "x2z", "x^2z", "x^2*z" or "xy3" into a MomentSpec."""
    clean = str(text).replace("*", "").replace(" ", "")
    exps = {"x": 0, "y": 0, "z": 0}
    pos = 0
    for match in _MOMENT_TOKEN.finditer(clean):
        if match.start() != pos:
            break
        exps[match.group(1)] += int(match.group(2) or 1)
        pos = match.end()
    if pos != len(clean) or not clean:
        raise ValueError(f"Cannot read moment '{text}'. Expected something like 'x2z' or 'x^2*y^2'.")
    return MomentSpec(exps["x"], exps["y"], exps["z"])


STANDARD_MOMENTS: Tuple[MomentSpec, ...] = tuple(
    parse_moment(t)
    for t in (
        "z",
        "x2", "xy", "y2", "z2",
        "x2z", "y2z", "xyz", "z3",
        "x4", "x3y", "x2y2", "x2z2", "xy3", "xyz2", "y4", "y2z2", "z4",
    )
)

MINIMAL_MOMENTS: Tuple[MomentSpec, ...] = tuple(
    parse_moment(t) for t in ("z", "z2", "y2z", "z3", "y2z2", "z4")
)

# rows of the summary table; moments in one row have identical normalised means
REPORT_GROUPS: Tuple[Tuple[MomentSpec, ...], ...] = tuple(
    tuple(parse_moment(t) for t in row)
    for row in (
        ("z", "x2", "xy"),
        ("y2",),
        ("z2", "xyz"),
        ("x2z",),
        ("y2z",),
        ("z3", "xyz2"),
        ("x4", "x3y"),
        ("x2y2",),
        ("x2z2",),
        ("xy3",),
        ("y4",),
        ("y2z2",),
        ("z4",),
    )
)


def moment_at_nonzero_eq(spec: MomentSpec, p: LorenzParams) -> Fraction:
    """x^l y^m z^n at x+ (and x-): beta^((l+m)/2) (r-1)^((l+m)/2 + n)."""
    if not spec.symmetric:
        raise ValueError(f"Moment {spec} is not symmetric (l + m = {spec.l + spec.m} is odd).")
    if p.symbolic:
        raise ValueError("moment_at_nonzero_eq needs a numeric r.")
    if p.beta * (p.r - 1) <= 0:
        raise ValueError(f"No nonzero equilibria at beta={p.beta}, r={p.r}.")
    h = (spec.l + spec.m) // 2
    return p.beta**h * (p.r - 1) ** (h + spec.n)


def normalize(value, spec: MomentSpec, p: LorenzParams):
    ref = moment_at_nonzero_eq(spec, p)
    if ref == 0:
        raise ValueError(f"Moment {spec} vanishes at the nonzero equilibria; cannot normalise.")
    if isinstance(value, (Fraction, int)):
        return Fraction(value) / ref
    return float(value) / float(ref)


# -----------------------------
# Step 3: Relations between mean moments
# -----------------------------

@dataclass(frozen=True)
class ProportionalRelation:
    """lhs + f . grad V == factor * rhs identically, so mean(lhs) = factor * mean(rhs)."""

    lhs: MomentSpec
    V: Poly
    rhs: MomentSpec
    factor: Fraction


def proportional_family(n: int, p: Optional[LorenzParams] = None) -> Tuple[ProportionalRelation, ProportionalRelation]:
    """mean(x^(n-1) y) = mean(x^n) and mean(x y z^(n-1)) = beta mean(z^n)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    p = p or LorenzParams()
    vs = lorenz_varset(p)
    f = vector_field(p)
    records = (
        ProportionalRelation(
            MomentSpec(n - 1, 1, 0),
            Poly.monomial(vs, (n, 0, 0) + (0,) * len(vs.param_vars), Fraction(-1, n) / p.sigma),
            MomentSpec(n, 0, 0),
            Fraction(1),
        ),
        ProportionalRelation(
            MomentSpec(1, 1, n - 1),
            Poly.monomial(vs, (0, 0, n) + (0,) * len(vs.param_vars), Fraction(-1, n)),
            MomentSpec(0, 0, n),
            p.beta,
        ),
    )
    for rec in records:
        residual = rec.lhs.poly(vs) + lie_derivative(rec.V, f) - rec.rhs.poly(vs) * rec.factor
        if not residual.is_zero():
            raise InternalConsistencyError(f"proportional relation for {rec.lhs} leaves {to_text(residual)}")
    return records


@dataclass(frozen=True)
class Relation:
    """mean(lhs) = sum_k coeff_k mean(moment_k), from lhs + f . grad V == sum_k coeff_k moment_k."""

    lhs: MomentSpec
    V: Poly
    terms: Tuple[Tuple[MomentSpec, Poly], ...]

    def rhs_poly(self, varset: VarSet) -> Poly:
        out = Poly.zero(varset)
        for spec, coeff in self.terms:
            out = out + coeff * spec.poly(varset)
        return out

    def text(self) -> str:
        parts = [f"({to_text(c)})*{spec}" for spec, c in self.terms]
        return f"{self.lhs} = " + " + ".join(parts)


@dataclass(frozen=True)
class RelationTable:
    relations: Tuple[Relation, ...]
    chain: Dict[MomentSpec, Tuple[Tuple[MomentSpec, Poly], ...]]   # every moment over MINIMAL_MOMENTS

    def residuals(self, averages: Mapping[str, float]) -> Dict[str, float]:
        """mean(lhs) - sum_k coeff_k mean(moment_k) on measured averages (numeric r only)."""
        out: Dict[str, float] = {}
        for rel in self.relations:
            names = [rel.lhs.name] + [spec.name for spec, _ in rel.terms]
            if any(n not in averages for n in names):
                continue
            value = float(averages[rel.lhs.name])
            for spec, coeff in rel.terms:
                value -= _constant(coeff) * float(averages[spec.name])
            out[rel.lhs.name] = value
        return out


def _constant(p: Poly) -> float:
    if not p.is_param_only() or p.degree() > 0:
        raise ValueError(f"Coefficient {to_text(p)} depends on a parameter variable.")
    return float(p.coefficient((0,) * len(p.varset)))


def _relation_rows(vs: VarSet, p: LorenzParams, r: Poly) -> List[Tuple[str, Poly, List[Tuple[str, Poly]]]]:
    b, s = p.beta, p.sigma
    one = Poly.constant(vs, 1)
    P = lambda text: parse_poly(text, vs)  # noqa: E731
    d = 1 + b + 2 * s
    return [
        ("xy", P("-z"), [("z", one * b)]),
        ("x2", P("x^2") * (1 / (2 * s)), [("xy", one)]),
        ("y2", P("(y^2 + z^2)/2"), [("xy", r), ("z2", one * -b)]),
        ("x2z", P("x*y"), [("x2", r), ("xy", one * -(1 + s)), ("y2", one * s)]),
        ("xyz", P("-z^2/2"), [("z2", one * b)]),
        ("x3y", P("-x^2*z"), [("x2z", one * (b + 2 * s)), ("xyz", one * (-2 * s))]),
        ("x4", P("x^4") * (1 / (4 * s)), [("x3y", one)]),
        ("xyz2", P("-z^3/3"), [("z3", one * b)]),
        ("xy3", P("-y^2*z"), [("y2z", one * (2 + b)), ("xyz", r * -2), ("xyz2", one * 2)]),
        (
            "x2z2",
            (P("x*y*z") * (2 * (1 + s)) + P("x^2*(y^2 + z^2)")) * (1 / (2 * d)),
            [
                ("y2z", one * (s * (s + 1) / d)),
                ("x2z", r * ((1 + s) / d)),
                ("xyz", one * (-(1 + s) * (1 + b + s) / d)),
                ("x3y", r * (1 / d)),
                ("xy3", one * (s / d)),
                ("xyz2", one * (s / d)),
            ],
        ),
        ("x2y2", P("-x*y*z"), [("y2z", one * -s), ("x2z", -r), ("xyz", one * (1 + b + s)), ("x2z2", one)]),
        ("y4", P("(y^2 + z^2)^2/4"), [("xy3", r), ("xyz2", r), ("y2z2", one * -(1 + b)), ("z4", one * -b)]),
    ]


def moment_relations(p: LorenzParams, param: str = "r") -> RelationTable:
    """
    The twelve relations expressing every symmetric moment up to quartic
    degree through the minimal set, each checked identically, plus the
    chained form over MINIMAL_MOMENTS.
    """
    vs = lorenz_varset(p, param)
    f = vector_field(p, param=param)
    if p.symbolic:
        r = Poly.variable(vs, param) + (1 if param == "rho" else 0)
    else:
        r = Poly.constant(vs, p.r)

    relations: List[Relation] = []
    for lhs, V, terms in _relation_rows(vs, p, r):
        rel = Relation(parse_moment(lhs), V, tuple((parse_moment(t), c) for t, c in terms))
        residual = rel.lhs.poly(vs) + lie_derivative(V, f) - rel.rhs_poly(vs)
        if not residual.is_zero():
            raise InternalConsistencyError(f"relation for {lhs} leaves residual {to_text(residual)}")
        relations.append(rel)

    chain: Dict[MomentSpec, Dict[MomentSpec, Poly]] = {m: {m: Poly.constant(vs, 1)} for m in MINIMAL_MOMENTS}
    for rel in relations:
        combo: Dict[MomentSpec, Poly] = {}
        for spec, coeff in rel.terms:
            if spec not in chain:
                raise InternalConsistencyError(f"{rel.lhs} refers to {spec} before it is expressed")
            for base, c in chain[spec].items():
                combo[base] = combo.get(base, Poly.zero(vs)) + coeff * c
        chain[rel.lhs] = {k: v for k, v in combo.items() if not v.is_zero()}

    ordered = {
        spec: tuple((m, chain[spec][m]) for m in MINIMAL_MOMENTS if m in chain[spec])
        for spec in STANDARD_MOMENTS
    }
    logger.debug("verified %d moment relations", len(relations))
    return RelationTable(tuple(relations), ordered)


# -----------------------------
# Step 4: Built-in certificates
# -----------------------------

def xy3_weight(beta):
    """Weight of the y^4 square in the xy3 certificate: -(beta^2 - 12 beta + 4) / (4 beta)."""
    return -(beta * beta - 12 * beta + 4) / (4 * beta)


def z3_gram_blocks(beta: Fraction, sigma: Fraction, gamma1: Fraction, gamma2: Fraction):
    """Gram blocks of the z3 certificate for a choice of the two free entries."""
    b, s, g1, g2 = (as_rational(v) for v in (beta, sigma, gamma1, gamma2))
    k = 1 / (2 * b)
    a13 = 1 + 2 * b * g1
    a23 = b * (g2 - 1) - 1
    Qs = [[2 * k, -k, a13 * k], [-k, 2 * k, a23 * k], [a13 * k, a23 * k, 2 * b * k]]
    h = Fraction(1, 2)
    Qa = [
        [h * 6 / b, -h / (1 + s), -h],
        [-h / (1 + s), 1 - 2 * g1 - g2, g1],
        [-h, g1, g2],
    ]
    return Qs, Qa


def _system(p: LorenzParams, param: str) -> Dict[str, str]:
    return {"beta": str(p.beta), "sigma": str(p.sigma), "param": param}


def _z2_certificate(p: LorenzParams) -> RationalCertificate:
    if p.beta <= 0:
        raise RegionViolation("beta > 0", f"beta = {p.beta}")
    q = LorenzParams(p.beta, p.sigma, None)
    vs = lorenz_varset(q, "r")
    P = lambda text: parse_poly(text, vs)  # noqa: E731
    b, s = p.beta, p.sigma
    aux = {"c1": 2 / b, "c2": 1 / (b * s), "c3": 1 / b}
    ansatz = AuxAnsatz((P("z"), P("x^2"), P("y^2 + z^2 - 2*r*z")), ("c1", "c2", "c3"))
    return RationalCertificate(
        name="z2",
        sense="upper",
        varset=vs,
        phi=P("z^2"),
        field=vector_field(q, param="r"),
        V=ansatz.assemble(aux, vs),
        bound=P("(r - 1)^2"),
        basis=BasisPair(vs, (P("z - r + 1"),), (P("x - y"),)),
        gram={"s": ((Fraction(1),),), "a": ((2 / b,),)},
        aux_coeffs=aux,
        ansatz=ansatz,
        system=_system(p, "r"),
    )


def _z3_certificate(p: LorenzParams, gamma: Optional[Tuple[Number, Number]]) -> RationalCertificate:
    b, s = p.beta, p.sigma
    if b <= 0 or s <= 0:
        raise RegionViolation("beta > 0 and sigma > 0", f"beta = {b}, sigma = {s}")
    upper = z3_beta_upper_limit(s)
    if b > upper:
        raise RegionViolation(f"beta <= {upper}", f"beta = {b}")

    candidates = [tuple(as_rational(g) for g in gamma)] if gamma is not None else [DEFAULT_Z3_WITNESS]
    chosen = None
    for g1, g2 in candidates:
        if _gamma_verified(b, s, g1, g2):
            chosen = (g1, g2)
            break
    if chosen is None and gamma is None:
        region = gamma_feasible(b, s)
        if region.feasible:
            chosen = region.witness
    if chosen is None:
        raise RegionViolation(
            "Gram blocks PSD for some (gamma1, gamma2)",
            f"no admissible pair at beta = {b}, sigma = {s}",
        )

    q = LorenzParams(b, s, None)
    vs = lorenz_varset(q, "rho")
    P = lambda text: parse_poly(text, vs)  # noqa: E731
    V1 = P("x^4") * (1 / s) + P("(y^2 + z^2 - 2*rho*z)^2 + 8*rho^2*(y^2 + z^2 - 2*rho*z)") + P("rho^2*x^2") * (6 / s)
    V2 = -P("rho") * (P("x") * (1 / s) + P("y")) ** 2
    ansatz = AuxAnsatz((V1, V2), ("c1", "c2"))
    aux = {"c1": 1 / (4 * b), "c2": s / (2 * (1 + s))}
    Qs, Qa = z3_gram_blocks(b, s, *chosen)
    system = _system(p, "rho")
    system["gamma1"], system["gamma2"] = str(chosen[0]), str(chosen[1])
    return RationalCertificate(
        name="z3",
        sense="upper",
        varset=vs,
        phi=P("rho*z^3"),
        field=vector_field(q, param="rho"),
        V=ansatz.assemble(aux, vs),
        bound=P("rho^4"),
        basis=BasisPair(
            vs,
            (P("x^2 - x*y"), P("x^2 - y^2"), P("(z - rho)^2")),
            (P("rho*(x - y)"), P("x*(z - rho)"), P("y*(z - rho)")),
        ),
        gram={"s": tuple(map(tuple, Qs)), "a": tuple(map(tuple, Qa))},
        aux_coeffs=aux,
        ansatz=ansatz,
        system=system,
    )


def _xy3_certificate(p: LorenzParams) -> RationalCertificate:
    b = p.beta
    if b <= 0 or b * b - 12 * b + 4 > 0:
        raise RegionViolation("beta^2 - 12*beta + 4 <= 0", f"beta = {b} (admissible: 6 - 4*sqrt(2) <= beta <= 6 + 4*sqrt(2))")
    q = LorenzParams(b, p.sigma, None)
    vs = lorenz_varset(q, "r")
    P = lambda text: parse_poly(text, vs)  # noqa: E731
    # twice r*xy^3 >= 0, so that the Gram entries below match term by term
    V = P("-r^2*z^2 + r*y^2*z + 4/3*r*z^3 - (y^2 + z^2)^2/2") * 2
    Qs = (
        (4 * b, -(2 + b), -4 * b),
        (-(2 + b), Fraction(4), 2 + b),
        (-4 * b, 2 + b, 4 * b),
    )
    return RationalCertificate(
        name="xy3",
        sense="lower",
        varset=vs,
        phi=P("2*r*x*y^3"),
        field=vector_field(q, param="r"),
        V=V,
        bound=Poly.zero(vs),
        basis=BasisPair(vs, (P("r*z"), P("y^2"), P("z^2")), (P("y*z"),)),
        gram={"s": Qs, "a": ((2 * b,),)},
        system=_system(p, "r"),
    )


def builtin_certificate(
    name: str,
    p: Optional[LorenzParams] = None,
    gamma: Optional[Tuple[Number, Number]] = None,
) -> RationalCertificate:
    """
    One of the analytic certificates, with r kept as a polynomial variable
    (as rho = r - 1 for z3). Raises RegionViolation outside its region.
    """
    p = p or LorenzParams()
    if name == "z2":
        cert = _z2_certificate(p)
    elif name == "z3":
        cert = _z3_certificate(p, gamma)
    elif name == "xy3":
        cert = _xy3_certificate(p)
    else:
        raise KeyError(f"Unknown certificate '{name}'. Expected one of: {list(BUILTIN_CERTIFICATES)}")
    logger.info("built %s certificate at beta=%s sigma=%s", name, p.beta, p.sigma)
    return cert


# -----------------------------
# Step 5: Where the z3 certificate exists
# -----------------------------

def gamma_inequalities(beta, sigma, g1, g2) -> Tuple:
    """
    Sign conditions (all >= 0) for the two z3 Gram blocks to be PSD: the
    determinant and the sum of 2x2 minors of each block, and the trace of the
    antisymmetric one. Works on Fractions and on numpy arrays.
    """
    b, s = beta, sigma
    u = g2 - 1
    return (
        -b * b * (4 * g1 * g1 + 2 * u * g1 + u * u) + b * (2 + g2 - 2 * g1) - 1,
        -(b * b * (4 * g1 * g1 + u * u) + b * (4 * g1 - 2 * (g2 + 3)) - 1),
        2 * g1 * (s + 1) * (b * (s + 2) - 12 * g2 * (s + 1))
        + g2 * ((b + 12) * s * (s + 2) - 12 * g2 * (s + 1) ** 2 + 12)
        - b * (s + 1) ** 2
        - 12 * g1 * g1 * (s + 1) ** 2,
        -(4 * (s + 1) ** 2 * (b * g1 * g1 + 2 * g1 * (b * g2 + 3) + b * u * g2) + b * (s * (s + 2) + 2) - 12 * (s + 1) ** 2),
        b * (1 - 2 * g1) + 3,
    )


def z3_beta_upper_limit(sigma: Number) -> Fraction:
    """12 (1 + sigma)^2 / (2 + sigma)^2."""
    s = as_rational(sigma)
    return 12 * (1 + s) ** 2 / (2 + s) ** 2


def _gamma_verified(beta: Fraction, sigma: Fraction, g1: Fraction, g2: Fraction) -> bool:
    if any(v < 0 for v in gamma_inequalities(beta, sigma, g1, g2)):
        return False
    Qs, Qa = z3_gram_blocks(beta, sigma, g1, g2)
    return check_psd_exact(Qs).psd and check_psd_exact(Qa).psd


def _gamma_box(beta: float) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    root = 2 * math.sqrt(beta)
    return (
        ((-1 - root) / (2 * beta), (-1 + root) / (2 * beta)),
        (1 + (1 - root) / beta, 1 + (1 + root) / beta),
    )


def _scales(beta: float, sigma: float) -> np.ndarray:
    big = (1 + sigma) ** 2 * (1 + beta)
    return np.array([1 + beta * beta, 1 + beta * beta, big, big, 1 + beta])


def _margin(beta: float, sigma: float, g1, g2, scales: np.ndarray):
    vals = gamma_inequalities(beta, sigma, g1, g2)
    return np.min(np.stack([np.asarray(v, dtype=float) / c for v, c in zip(vals, scales)]), axis=0)


@dataclass(frozen=True)
class GammaSearch:
    point: Tuple[float, float]
    margin: float
    grid_margin: float


def _search_gamma(beta: float, sigma: float, grid: int = 200) -> GammaSearch:
    (a1, b1), (a2, b2) = _gamma_box(beta)
    scales = _scales(beta, sigma)
    G1, G2 = np.meshgrid(np.linspace(a1, b1, grid), np.linspace(a2, b2, grid), indexing="ij")
    M = _margin(beta, sigma, G1, G2, scales)
    k = np.unravel_index(np.argmax(M), M.shape)
    x0 = np.array([G1[k], G2[k], M[k]])
    grid_margin = float(M[k])

    cons = [
        {"type": "ineq", "fun": (lambda z, i=i: float(gamma_inequalities(beta, sigma, z[0], z[1])[i]) / scales[i] - z[2])}
        for i in range(5)
    ]
    res = minimize(
        lambda z: -z[2],
        x0,
        method="SLSQP",
        bounds=[(a1, b1), (a2, b2), (None, 1.0)],
        constraints=cons,
        options={"ftol": 1e-14, "maxiter": 300},
    )
    point = (float(res.x[0]), float(res.x[1])) if res.success else (float(G1[k]), float(G2[k]))
    margin = float(_margin(beta, sigma, point[0], point[1], scales))
    if margin < grid_margin:
        point, margin = (float(G1[k]), float(G2[k])), grid_margin
    return GammaSearch(point, margin, grid_margin)


@dataclass(frozen=True)
class GammaRegion:
    beta: Fraction
    sigma: Fraction
    status: str                                        # feasible | infeasible | inconclusive
    witness: Optional[Tuple[Fraction, Fraction]] = None
    margin: float = float("nan")
    upper_limit: Optional[Fraction] = None
    reason: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    def to_record(self) -> Dict:
        return {
            "beta": self.beta,
            "sigma": self.sigma,
            "status": self.status,
            "feasible": self.feasible,
            "witness": list(self.witness) if self.witness else None,
            "margin": self.margin,
            "upper_limit": self.upper_limit,
            "reason": self.reason,
        }


def _rational_candidates(point: Tuple[float, float]) -> List[Tuple[Fraction, Fraction]]:
    out: List[Tuple[Fraction, Fraction]] = []
    for limit in (8, 64, 1000, 10**4, 10**6):
        c1 = Fraction(point[0]).limit_denominator(limit)
        c2 = Fraction(point[1]).limit_denominator(limit)
        step = Fraction(1, limit)
        for cand in ((c1, c2), (c1 + step, c2), (c1 - step, c2), (c1, c2 + step), (c1, c2 - step)):
            if cand not in out:
                out.append(cand)
    return out


def gamma_feasible(beta: Number, sigma: Number) -> GammaRegion:
    """
    Search (gamma1, gamma2) making the z3 Gram blocks PSD: float grid over
    the box implied by the 2x2 minors, local refinement, then rational
    candidates checked exactly. Infeasible only with the closed-form upper
    limit violated or a clearly negative refined margin.
    """
    b, s = as_rational(beta), as_rational(sigma)
    if b <= 0 or s <= 0:
        raise ValueError(f"beta and sigma must be > 0, got beta={b}, sigma={s}")
    upper = z3_beta_upper_limit(s)
    if b > upper:
        return GammaRegion(b, s, "infeasible", upper_limit=upper, reason=f"beta > {upper}")

    search = _search_gamma(float(b), float(s))
    for g1, g2 in _rational_candidates(search.point):
        if _gamma_verified(b, s, g1, g2):
            logger.info("z3 region: witness (%s, %s) at beta=%s sigma=%s", g1, g2, b, s)
            return GammaRegion(b, s, "feasible", (g1, g2), search.margin, upper)
    if search.margin < -1e-4:
        return GammaRegion(b, s, "infeasible", None, search.margin, upper, "refined margin is negative")
    return GammaRegion(b, s, "inconclusive", None, search.margin, upper, "no rational witness near the best point")


def gamma2_interval(beta: Number, sigma: Number, grid: int = 200) -> Optional[Tuple[float, float]]:
    """Numerical range of gamma2 over admissible (gamma1, gamma2); None when none is found."""
    b, s = float(as_rational(beta)), float(as_rational(sigma))
    (a1, b1), (a2, b2) = _gamma_box(b)
    scales = _scales(b, s)
    G1, G2 = np.meshgrid(np.linspace(a1, b1, grid), np.linspace(a2, b2, grid), indexing="ij")
    M = _margin(b, s, G1, G2, scales)
    inside = M >= 0
    if not inside.any():
        best = _search_gamma(b, s, grid)
        if best.margin < 0:
            return None
        starts = [best.point]
    else:
        idx = np.argwhere(inside)
        lo_k = idx[np.argmin(G2[inside])]
        hi_k = idx[np.argmax(G2[inside])]
        starts = [(G1[tuple(lo_k)], G2[tuple(lo_k)]), (G1[tuple(hi_k)], G2[tuple(hi_k)])]

    cons = [
        {"type": "ineq", "fun": (lambda z, i=i: float(gamma_inequalities(b, s, z[0], z[1])[i]) / scales[i])}
        for i in range(5)
    ]
    ends = []
    for sign, start in ((1.0, starts[0]), (-1.0, starts[-1])):
        res = minimize(
            lambda z: sign * z[1],
            np.array(start, dtype=float),
            method="SLSQP",
            bounds=[(a1, b1), (a2, b2)],
            constraints=cons,
            options={"ftol": 1e-14, "maxiter": 300},
        )
        ok = res.success and float(_margin(b, s, res.x[0], res.x[1], scales)) >= -1e-9
        ends.append(float(res.x[1]) if ok else float(start[1]))
    return (min(ends), max(ends))


def z3_region_bounds(sigma: Number, tol: float = 1e-6) -> Tuple[float, Fraction]:
    """
    (lower beta limit found by bisection on the refined margin, exact upper
    limit 12 (1 + sigma)^2 / (2 + sigma)^2).
    """
    s = as_rational(sigma)
    if s <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    upper = z3_beta_upper_limit(s)

    def admissible(beta: float) -> bool:
        return _search_gamma(beta, float(s)).margin >= 0

    lo, hi = 1e-3, 1.0
    if admissible(lo) or not admissible(hi):
        raise ValueError(f"Cannot bracket the lower beta limit at sigma={s} within [{lo}, {hi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if admissible(mid):
            hi = mid
        else:
            lo = mid
    logger.info("z3 region at sigma=%s: beta in [%.7f, %s]", s, hi, upper)
    return 0.5 * (lo + hi), upper


# -----------------------------
# Step 6: Bounding problems for moments
# -----------------------------

def moment_problem(
    p: LorenzParams,
    spec: MomentSpec,
    degree: int,
    sense: str = "upper",
    state_scale: Number = 1,
) -> GramProblem:
    """
    GramProblem for bounding mean(x^l y^m z^n) with V of the given degree
    (0 means no auxiliary function), in coordinates x = state_scale * x'.
    The bound found is in scaled units; multiply by state_scale^(l+m+n).
    """
    validate_sense(sense)
    if p.symbolic:
        raise ValueError("moment_problem needs a numeric r; use gen_lorenz_V_basis(d, True) for symbolic r.")
    vs = lorenz_varset(p)
    f = vector_field(p, state_scale)
    ansatz = AuxAnsatz.empty() if degree == 0 else gen_lorenz_V_basis(degree)
    s = build_bound_poly(spec.poly(vs), f, ansatz, sense)
    return assemble_gram_constraints(s, gen_basis_pair(s), strict=False)
