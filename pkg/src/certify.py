"""
certify.py

Turns approximate SDP solutions into proofs that can be checked with exact
rational arithmetic.

Responsibilities:
- Decide positive semidefiniteness exactly, two ways (characteristic
  polynomial sign pattern and pivoted LDL^T), and refuse to answer if they
  disagree.
- Hold RationalCertificate objects and verify them against (phi, f, V, bound).
- Project a numeric solution onto rational Gram matrices that satisfy the
  coefficient-matching equations exactly (project_to_rational).
- Pad the bound until the projection succeeds (enclose_upper / enclose_lower).
- Read the sum-of-squares form off a certificate (sos_decompose).
- Read/write certificate.json.

Never calls the solver except to recentre a padded problem in
project_to_rational.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from polyalg import Poly, VarSet, as_rational, lie_derivative, monomial_text, parse_poly, substitute, to_text
from sosform import (
    AuxAnsatz,
    BasisPair,
    GramProblem,
    quadratic_form,
    to_sdp,
    validate_sense,
)


logger = logging.getLogger(__name__)

DEFAULT_DENOMINATOR_LIMIT = 10**6
DEFAULT_PADDING_SCHEDULE = ("0", "1e-9", "1e-7", "1e-5", "1e-3")

Matrix = List[List[Fraction]]


class CertificationError(RuntimeError):
    """The two exact PSD tests disagree. This is a bug, never a verdict."""


# -----------------------------
# Step 1: Exact PSD decision
# -----------------------------

def as_fraction_matrix(m: Sequence[Sequence]) -> Matrix:
    rows = [[as_rational(v) if not isinstance(v, Fraction) else v for v in row] for row in m]
    n = len(rows)
    for row in rows:
        if len(row) != n:
            raise ValueError(f"Matrix is not square: {n} rows but a row of length {len(row)}")
    for i in range(n):
        for j in range(i + 1, n):
            if rows[i][j] != rows[j][i]:
                raise ValueError(f"Matrix is not symmetric at ({i}, {j}): {rows[i][j]} != {rows[j][i]}")
    return rows


def _matmul(A: Matrix, B: Matrix) -> Matrix:
    n = len(A)
    cols = [[B[k][j] for k in range(n)] for j in range(n)]
    return [[sum((a * b for a, b in zip(A[i], cols[j]) if a and b), Fraction(0)) for j in range(n)] for i in range(n)]


def charpoly(m: Sequence[Sequence]) -> List[Fraction]:
    """
    Coefficients of det(lambda I - A), highest power first, by Faddeev-LeVerrier.

    The leading coefficient is 1; entry k multiplies lambda^(n-k).
    """
    A = as_fraction_matrix(m)
    n = len(A)
    coeffs = [Fraction(1)]
    M = [[Fraction(int(i == j)) for j in range(n)] for i in range(n)]
    for k in range(1, n + 1):
        AM = _matmul(A, M)
        c = -sum((AM[i][i] for i in range(n)), Fraction(0)) / k
        coeffs.append(c)
        M = AM
        for i in range(n):
            M[i][i] += c
    return coeffs


@dataclass(frozen=True)
class LDL:
    """P A P^T = L diag(D) L^T, with (P v)_i = v[perm[i]] and L unit lower triangular."""

    perm: Tuple[int, ...]
    L: Tuple[Tuple[Fraction, ...], ...]
    D: Tuple[Fraction, ...]

    @property
    def rank(self) -> int:
        return sum(1 for d in self.D if d != 0)


def ldl_pivoted(m: Sequence[Sequence]) -> Tuple[bool, Optional[LDL]]:
    """
    Exact LDL^T with largest-diagonal pivoting.

    Returns (psd, factorization). When every remaining diagonal entry is zero
    the trailing block must vanish for the matrix to be PSD; the factorization
    then ends in zero pivots.
    """
    A = [row[:] for row in as_fraction_matrix(m)]
    n = len(A)
    perm = list(range(n))
    L = [[Fraction(int(i == j)) for j in range(n)] for i in range(n)]
    D: List[Fraction] = []
    for k in range(n):
        p = max(range(k, n), key=lambda i: (A[i][i], -i))
        if A[p][p] <= 0:
            rest = range(k, n)
            if any(A[i][j] != 0 for i in rest for j in rest):
                return False, None
            D.extend([Fraction(0)] * (n - k))
            break
        if p != k:
            A[k], A[p] = A[p], A[k]
            for row in A:
                row[k], row[p] = row[p], row[k]
            perm[k], perm[p] = perm[p], perm[k]
            for j in range(k):
                L[k][j], L[p][j] = L[p][j], L[k][j]
        d = A[k][k]
        D.append(d)
        for i in range(k + 1, n):
            L[i][k] = A[i][k] / d
        for i in range(k + 1, n):
            if not L[i][k]:
                continue
            for j in range(k + 1, n):
                A[i][j] -= L[i][k] * A[k][j]
    return True, LDL(tuple(perm), tuple(tuple(r) for r in L), tuple(D))


@dataclass(frozen=True)
class PsdResult:
    psd: bool
    charpoly: Tuple[Fraction, ...]
    violated_index: Optional[int] = None    # k with (-1)^k charpoly[k] < 0
    ldl: Optional[LDL] = None

    @property
    def nonsingular(self) -> bool:
        return self.psd and self.ldl is not None and all(d > 0 for d in self.ldl.D)

    def __bool__(self) -> bool:
        return self.psd

    @property
    def witness(self) -> str:
        if self.psd:
            return "LDL^T pivots " + ", ".join(str(d) for d in self.ldl.D) if self.ldl else "empty"
        n = len(self.charpoly) - 1
        return f"coefficient of lambda^{n - self.violated_index} is {self.charpoly[self.violated_index]}"


def check_psd_exact(m: Sequence[Sequence]) -> PsdResult:
    """
    PSD by Descartes' rule: det(lambda I - A) has only real roots, so it has
    no negative root iff its coefficients alternate in sign (zeros allowed).
    Cross-checked with ldl_pivoted.
    """
    coeffs = charpoly(m)
    violated = None
    for k, c in enumerate(coeffs):
        if (c if k % 2 == 0 else -c) < 0:
            violated = k
            break
    ldl_ok, ldl = ldl_pivoted(m)
    by_signs = violated is None
    if by_signs != ldl_ok:
        raise CertificationError(
            f"Exact PSD tests disagree: sign pattern says {by_signs}, LDL^T says {ldl_ok}"
        )
    return PsdResult(psd=by_signs, charpoly=tuple(coeffs), violated_index=violated, ldl=ldl)


# -----------------------------
# Step 2: Certificates
# -----------------------------

def bound_poly_from(
    sense: str, phi: Poly, field_: Sequence[Poly], V: Poly, bound: Poly
) -> Poly:
    """S_L = phi - L + f . grad V, or S_U = -(phi - U + f . grad V)."""
    core = phi - bound + lie_derivative(V, field_)
    return core if validate_sense(sense) == "lower" else -core


@dataclass(frozen=True)
class RationalCertificate:
    """
    Proof that avg(phi) <= bound (upper) or >= bound (lower) for the system
    dx/dt = field: S built from (phi, field, V, bound) equals the Gram form.

    With state_scale s != 1 every polynomial lives in the coordinates x' = x/s
    and original_bound converts back.
    """

    name: str
    sense: str
    varset: VarSet
    phi: Poly
    field: Tuple[Poly, ...]
    V: Poly
    bound: Poly
    basis: BasisPair
    gram: Dict[str, Tuple[Tuple[Fraction, ...], ...]]
    aux_coeffs: Dict[str, Fraction] = field(default_factory=dict)
    ansatz: AuxAnsatz = field(default_factory=AuxAnsatz.empty)
    state_scale: Fraction = Fraction(1)
    system: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        validate_sense(self.sense)
        object.__setattr__(self, "field", tuple(self.field))
        gram = {}
        for label, elems in self.basis.blocks():
            Q = self.gram.get(label, ())
            if len(Q) != len(elems):
                raise ValueError(
                    f"Gram block '{label}' is {len(Q)}x{len(Q)} but the basis has {len(elems)} elements"
                )
            gram[label] = tuple(tuple(Fraction(v) for v in row) for row in Q)
        object.__setattr__(self, "gram", gram)
        if not self.bound.is_param_only():
            raise ValueError(f"Bound {to_text(self.bound)} depends on state variables.")

    @property
    def bound_value(self) -> Union[Fraction, Poly]:
        if self.bound.degree() <= 0:
            return self.bound.coefficient((0,) * len(self.varset))
        return self.bound

    @property
    def original_bound(self) -> Union[Fraction, Poly]:
        """Bound for the unscaled system (phi homogeneous of state degree p: times s^p)."""
        if self.state_scale == 1:
            return self.bound_value
        if not self.phi.is_state_homogeneous():
            raise ValueError("Only homogeneous phi can be mapped back from scaled coordinates.")
        return self.bound_value * self.state_scale ** self.phi.state_degree()

    def s_poly(self) -> Poly:
        return bound_poly_from(self.sense, self.phi, self.field, self.V, self.bound)

    def gram_form(self) -> Poly:
        return quadratic_form(self.basis, self.gram)

    def to_record(self) -> Dict:
        return {
            "record_type": "certificate",
            "name": self.name,
            "sense": self.sense,
            "varset": self.varset.to_dict(),
            "phi": to_text(self.phi),
            "field": [to_text(p) for p in self.field],
            "V": to_text(self.V),
            "bound": to_text(self.bound),
            "basis": {
                "s": [to_text(p) for p in self.basis.b_s],
                "a": [to_text(p) for p in self.basis.b_a],
            },
            "gram": {label: [[str(v) for v in row] for row in Q] for label, Q in self.gram.items()},
            "aux_coeffs": {k: str(v) for k, v in sorted(self.aux_coeffs.items())},
            "state_scale": str(self.state_scale),
            "system": dict(sorted(self.system.items())),
        }

    @classmethod
    def from_record(cls, data: Mapping) -> "RationalCertificate":
        if data.get("record_type") != "certificate":
            raise ValueError(f"Not a certificate record (record_type={data.get('record_type')!r})")
        vs = VarSet.from_dict(data["varset"])
        read = lambda text: parse_poly(text, vs)  # noqa: E731
        basis = BasisPair(
            vs,
            tuple(read(t) for t in data["basis"].get("s", [])),
            tuple(read(t) for t in data["basis"].get("a", [])),
        )
        return cls(
            name=str(data.get("name", "")),
            sense=data["sense"],
            varset=vs,
            phi=read(data["phi"]),
            field=tuple(read(t) for t in data["field"]),
            V=read(data["V"]),
            bound=read(data["bound"]),
            basis=basis,
            gram={label: tuple(tuple(Fraction(v) for v in row) for row in Q) for label, Q in data["gram"].items()},
            aux_coeffs={k: Fraction(v) for k, v in data.get("aux_coeffs", {}).items()},
            state_scale=Fraction(data.get("state_scale", "1")),
            system={k: str(v) for k, v in data.get("system", {}).items()},
        )


def write_certificate(cert: RationalCertificate, path: Path) -> Path:
    from utils import write_report

    return write_report(path, cert.to_record())


def load_certificate(path: Path) -> RationalCertificate:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Certificate file not found at {p}. Run `certify` first or check the path.")
    with p.open("r", encoding="utf-8") as f:
        return RationalCertificate.from_record(json.load(f))


@dataclass(frozen=True)
class Verification:
    identity_holds: bool
    psd: Dict[str, PsdResult]
    mismatch: Optional[Tuple[str, Fraction]] = None     # (monomial, S minus Gram form)

    @property
    def ok(self) -> bool:
        return self.identity_holds and all(r.psd for r in self.psd.values())

    def __bool__(self) -> bool:
        return self.ok

    @property
    def reason(self) -> str:
        if not self.identity_holds:
            mono, diff = self.mismatch
            return f"coefficient mismatch at {mono}: S minus Gram form is {diff}"
        bad = [label for label, r in self.psd.items() if not r.psd]
        if bad:
            return "; ".join(f"block {label} not PSD ({self.psd[label].witness})" for label in bad)
        return "verified"


def verify_certificate(
    cert: RationalCertificate,
    phi: Optional[Poly] = None,
    f: Optional[Sequence[Poly]] = None,
    V: Optional[Poly] = None,
) -> Verification:
    """
    Exact check: S(phi, f, V, bound) == b_s^T Q_s b_s + b_a^T Q_a b_a and
    every block PSD. phi, f and V default to the ones stored in the
    certificate.
    """
    phi = cert.phi if phi is None else phi
    f = cert.field if f is None else tuple(f)
    V = cert.V if V is None else V
    for p in [phi, V, *f]:
        if p.mode != "exact":
            raise ValueError("verify_certificate needs exact polynomials.")
    diff = bound_poly_from(cert.sense, phi, f, V, cert.bound) - cert.gram_form()
    mismatch = None
    if not diff.is_zero():
        m, c = diff.items()[0]
        mismatch = (monomial_text(m, cert.varset), c)
        logger.info("certificate %s: mismatch at %s", cert.name, mismatch[0])
    psd = {label: check_psd_exact(cert.gram[label]) for label, elems in cert.basis.blocks() if elems}
    return Verification(identity_holds=mismatch is None, psd=psd, mismatch=mismatch)


# -----------------------------
# Step 3: Projection onto rationals
# -----------------------------

@dataclass(frozen=True)
class ProjectionFailure:
    reason: str
    bound: Optional[Fraction] = None

    def __bool__(self) -> bool:
        return False


def _round(value: float, limit: int) -> Fraction:
    if not math.isfinite(value):
        raise ValueError(f"Cannot round non-finite value {value}")
    return Fraction(value).limit_denominator(limit)


def _rounded_bound(value: float, sense: str, padding: Fraction, limit: int) -> Fraction:
    target = Fraction(value) + (padding if sense == "upper" else -padding)
    scaled = target * limit
    edge = math.ceil(scaled) if sense == "upper" else math.floor(scaled)
    return Fraction(edge, limit)


def project_to_rational(
    sol,
    g: GramProblem,
    denominator_limit: int = DEFAULT_DENOMINATOR_LIMIT,
    padding: Union[Fraction, int, str, float] = 0,
    settings=None,
    name: str = "",
    state_scale: Union[Fraction, int] = 1,
    system: Optional[Mapping[str, str]] = None,
) -> Union[RationalCertificate, ProjectionFailure]:
    """
    Round a numeric solution to rationals and repair the equations exactly.

    For a bound problem the bound is first moved outward by `padding` and
    rounded outward to a multiple of 1/denominator_limit. With padding > 0 the
    fixed-bound problem is re-solved for its most interior point before
    rounding. Pivot entries of the exact system (aux coefficients first, then
    the Gram entries from the end) are solved for; the rest keep their rounded
    values. Fails if the result is not PSD.
    """
    padding = as_rational(padding)
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if denominator_limit < 1:
        raise ValueError(f"denominator_limit must be >= 1, got {denominator_limit}")
    if not sol.usable:
        return ProjectionFailure(f"solution status is {sol.status}")
    if g.structurally_infeasible:
        return ProjectionFailure("problem is structurally infeasible")

    source = sol
    bound_value: Optional[Fraction] = None
    work = g
    if g.objective is not None:
        bound_name, sense = g.objective
        bound_value = _rounded_bound(sol.free_scalars[bound_name], sense, padding, denominator_limit)
        work = g.with_fixed({bound_name: bound_value})
        if work.structurally_infeasible:
            return ProjectionFailure("fixing the bound makes the equations inconsistent", bound_value)
        if padding > 0:
            from sdpsolve import solve

            source = solve(to_sdp(work), settings)
            if not source.usable or source.objective_value <= 0:
                return ProjectionFailure(
                    f"no interior point at padded bound {bound_value} (status {source.status}, "
                    f"margin {source.objective_value:.3g})",
                    bound_value,
                )

    try:
        numeric = [source.free_scalars[n] for n in work.free_names]
        numeric += [float(source.block(label)[i, j]) for label, i, j in work.gram_index]
        rounded = [_round(v, denominator_limit) for v in numeric]
    except (KeyError, IndexError, ValueError) as e:
        return ProjectionFailure(f"solution does not match the problem layout: {e}", bound_value)

    n_free = work.n_free
    priority = list(range(n_free)) + list(range(len(work.columns) - 1, n_free - 1, -1))
    ech = work.echelon(priority)
    if ech.inconsistent:
        return ProjectionFailure("affine repair is inconsistent; reduce the basis", bound_value)
    free_values = {c: rounded[c] for c in range(len(rounded)) if c not in ech.pivots}
    exact = list(rounded)
    for col, value in ech.solve(free_values).items():
        exact[col] = value

    blocks = work.gram_blocks(exact)
    for label, Q in blocks.items():
        if not Q:
            continue
        result = check_psd_exact(Q)
        if not result.psd:
            return ProjectionFailure(f"rounded block {label} is not PSD ({result.witness})", bound_value)

    named = work.all_fixed()
    named.update({n: exact[k] for k, n in enumerate(work.free_names)})
    s = g.s
    aux = {n: named[n] for n in s.aux_names}
    cert = RationalCertificate(
        name=name,
        sense=s.sense,
        varset=s.varset,
        phi=s.phi,
        field=s.field,
        V=s.ansatz.assemble(aux, s.varset),
        bound=s.bound.value({n: named[n] for n in s.bound_names}),
        basis=g.basis,
        gram={label: tuple(tuple(row) for row in Q) for label, Q in blocks.items()},
        aux_coeffs=aux,
        ansatz=s.ansatz,
        state_scale=as_rational(state_scale),
        system=dict(system or {}),
    )
    check = verify_certificate(cert)
    if not check:
        return ProjectionFailure(f"projected certificate does not verify: {check.reason}", bound_value)
    logger.info("projected %s certificate (padding %s, bound %s)", s.sense, padding, bound_value)
    return cert


# -----------------------------
# Step 4: Enclosures
# -----------------------------

@dataclass(frozen=True)
class EnclosureReport:
    status: str                                  # verified | failed
    numeric_optimum: float
    verified_bound: Optional[Fraction] = None
    padding: Optional[Fraction] = None
    certificate: Optional[RationalCertificate] = None
    attempts: Tuple[Tuple[str, str], ...] = ()   # (padding, outcome)

    @property
    def verified(self) -> bool:
        return self.status == "verified"

    def to_record(self) -> Dict:
        return {
            "status": self.status,
            "numeric_optimum": self.numeric_optimum,
            "verified_bound": self.verified_bound,
            "padding": self.padding,
            "attempts": [list(a) for a in self.attempts],
        }


def _enclose(
    g: GramProblem,
    sol,
    sense: str,
    schedule: Optional[Sequence] = None,
    denominator_limit: int = DEFAULT_DENOMINATOR_LIMIT,
    settings=None,
    **cert_kwargs,
) -> EnclosureReport:
    if g.objective is None or g.objective[1] != sense:
        raise ValueError(f"Expected a problem with a free {sense} bound, got objective {g.objective}")
    optimum = float(sol.objective_value) if sol.usable else float("nan")
    if not sol.usable:
        return EnclosureReport("failed", optimum, attempts=(("-", f"solution status {sol.status}"),))

    scale = Fraction(max(1.0, abs(optimum))).limit_denominator(denominator_limit)
    attempts: List[Tuple[str, str]] = []
    for raw in schedule if schedule is not None else DEFAULT_PADDING_SCHEDULE:
        padding = as_rational(raw) * scale
        result = project_to_rational(
            sol, g, denominator_limit, padding, settings, **cert_kwargs
        )
        if isinstance(result, RationalCertificate):
            attempts.append((str(padding), "verified"))
            bound = result.bound_value
            logger.info("%s bound verified at %s with padding %s", sense, bound, padding)
            return EnclosureReport(
                status="verified",
                numeric_optimum=optimum,
                verified_bound=bound,
                padding=padding,
                certificate=result,
                attempts=tuple(attempts),
            )
        attempts.append((str(padding), result.reason))
        logger.debug("padding %s failed: %s", padding, result.reason)
    return EnclosureReport("failed", optimum, attempts=tuple(attempts))


def enclose_upper(g: GramProblem, sol, schedule: Optional[Sequence] = None, **kwargs) -> EnclosureReport:
    """Smallest padding in the schedule (times max(1, |optimum|)) that certifies an upper bound."""
    return _enclose(g, sol, "upper", schedule, **kwargs)


def enclose_lower(g: GramProblem, sol, schedule: Optional[Sequence] = None, **kwargs) -> EnclosureReport:
    return _enclose(g, sol, "lower", schedule, **kwargs)


# -----------------------------
# Step 5: Sum-of-squares form and specialisation
# -----------------------------

def sos_decompose(cert: RationalCertificate) -> List[Tuple[Fraction, Poly]]:
    """
    S as sum_k w_k p_k^2 with w_k > 0, from the LDL^T factor of each block:
    p_k = sum_i L[i][k] b[perm[i]] and w_k = D[k].
    """
    out: List[Tuple[Fraction, Poly]] = []
    for label, elems in cert.basis.blocks():
        if not elems:
            continue
        ok, ldl = ldl_pivoted(cert.gram[label])
        if not ok:
            raise ValueError(f"Block {label} is not PSD; no sum-of-squares form.")
        n = len(elems)
        for k in range(n):
            w = ldl.D[k]
            if w == 0:
                continue
            p = Poly.zero(cert.varset)
            for i in range(k, n):
                if ldl.L[i][k]:
                    p = p + elems[ldl.perm[i]] * ldl.L[i][k]
            out.append((w, p))
    return out


def expand_sos(terms: Sequence[Tuple[Fraction, Poly]], varset: VarSet) -> Poly:
    out = Poly.zero(varset)
    for w, p in terms:
        out = out + p * p * w
    return out


def specialize(cert: RationalCertificate, r: Union[Fraction, int, str]) -> RationalCertificate:
    """
    Fix the Rayleigh parameter of a parametric certificate. The parameter
    variable is either r itself or rho = r - 1.
    """
    vs = cert.varset
    if not vs.param_vars:
        raise ValueError(f"Certificate {cert.name!r} has no parameter to specialise.")
    r = as_rational(r)
    param = vs.param_vars[0]
    value = r - 1 if param == "rho" else r
    target = VarSet(vs.state_vars)

    def sub(p: Poly) -> Poly:
        return substitute(p, {param: value}, target)

    basis = BasisPair(target, tuple(sub(p) for p in cert.basis.b_s), tuple(sub(p) for p in cert.basis.b_a))
    system = dict(cert.system)
    system["r"] = str(r)
    system.pop("param", None)
    return RationalCertificate(
        name=cert.name,
        sense=cert.sense,
        varset=target,
        phi=sub(cert.phi),
        field=tuple(sub(p) for p in cert.field),
        V=sub(cert.V),
        bound=sub(cert.bound),
        basis=basis,
        gram=cert.gram,
        aux_coeffs=dict(cert.aux_coeffs),
        state_scale=cert.state_scale,
        system=system,
    )
