"""
sdpsolve.py

Small dense primal-dual interior-point solver for the block-diagonal SDPs
built by sosform.to_sdp.

Problem form (all blocks PSD, w free):

    primal:  minimize  c . w      s.t.  A(X) + F w = b,  X >= 0
    dual:    maximize  b . y      s.t.  Z = -A*(y) >= 0, F^T y = c

Method: infeasible-start path following from X = xi I, Z = eta I, y = 0 with
Nesterov-Todd scaling and a Mehrotra predictor-corrector step. The free
scalars are kept in an augmented Newton system [[M, F], [F^T, 0]].

Also here: rescale_problem (x -> s x' rescaling of the state variables and the
map back to original units) and the solution.json writer.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import LinAlgError, cholesky, eigvalsh, lu_factor, lu_solve, solve_triangular, svd

from sosform import SDPConstraint, SDPInstance


logger = logging.getLogger(__name__)

VALID_STATUSES = ("optimal", "marginal", "infeasible", "numerical-failure")


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 200
    gap_tolerance: float = 1e-9
    feasibility_tolerance: float = 1e-9
    step_fraction: float = 0.98
    stall_tolerance: float = 1e-6       # accuracy accepted as "marginal" when steps stall
    divergence_limit: float = 1e12      # |y| or |X| beyond this means infeasible

    def __post_init__(self) -> None:
        if int(self.max_iterations) < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        for name in ("gap_tolerance", "feasibility_tolerance", "stall_tolerance", "divergence_limit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 < self.step_fraction < 1:
            raise ValueError(f"step_fraction must be in (0, 1), got {self.step_fraction}")

    @classmethod
    def from_config(cls, block: Optional[Mapping] = None) -> "SolverSettings":
        block = dict(block or {})
        accepted = [f.name for f in fields(cls)]
        unknown = sorted(set(block) - set(accepted))
        if unknown:
            raise ValueError(f"Unknown solver settings {unknown}. Expected one of: {accepted}")
        kwargs = {k: (int(v) if k == "max_iterations" else float(v)) for k, v in block.items()}
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class SDPSolution:
    status: str
    gram_blocks: Tuple[np.ndarray, ...]
    block_labels: Tuple[str, ...]
    free_scalars: Dict[str, float]
    objective_value: float              # bound in the caller's sense, or the margin t
    primal_objective: float
    dual_objective: float
    duality_gap: float                  # relative
    primal_residual: float              # relative
    dual_residual: float                # relative
    min_eigenvalue: float
    iterations: int
    dual: np.ndarray = field(default_factory=lambda: np.zeros(0))
    trace: Tuple[Dict[str, float], ...] = ()
    reason: str = ""
    feasibility: bool = False

    def block(self, label: str) -> np.ndarray:
        try:
            return self.gram_blocks[self.block_labels.index(label)]
        except ValueError:
            return np.zeros((0, 0))

    @property
    def usable(self) -> bool:
        return self.status in ("optimal", "marginal")

    def to_record(self) -> Dict:
        return {
            "record_type": "solution",
            "status": self.status,
            "reason": self.reason,
            "feasibility": self.feasibility,
            "objective_value": self.objective_value,
            "primal_objective": self.primal_objective,
            "dual_objective": self.dual_objective,
            "duality_gap": self.duality_gap,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "min_eigenvalue": self.min_eigenvalue,
            "iterations": self.iterations,
            "block_labels": list(self.block_labels),
            "gram_blocks": [b.tolist() for b in self.gram_blocks],
            "free_scalars": dict(self.free_scalars),
            "dual": self.dual.tolist(),
            "trace": list(self.trace),
        }

    @classmethod
    def from_record(cls, data: Mapping) -> "SDPSolution":
        if data.get("record_type") != "solution":
            raise ValueError(f"Not a solution record (record_type={data.get('record_type')!r})")
        status = data["status"]
        if status not in VALID_STATUSES:
            raise ValueError(f"Invalid status '{status}'. Expected one of: {list(VALID_STATUSES)}")
        return cls(
            status=status,
            gram_blocks=tuple(np.array(b, dtype=float).reshape(len(b), len(b)) for b in data["gram_blocks"]),
            block_labels=tuple(data["block_labels"]),
            free_scalars={k: float(v) for k, v in data["free_scalars"].items()},
            objective_value=float(data["objective_value"]),
            primal_objective=float(data["primal_objective"]),
            dual_objective=float(data["dual_objective"]),
            duality_gap=float(data["duality_gap"]),
            primal_residual=float(data["primal_residual"]),
            dual_residual=float(data["dual_residual"]),
            min_eigenvalue=float(data["min_eigenvalue"]),
            iterations=int(data["iterations"]),
            dual=np.array(data.get("dual", []), dtype=float),
            trace=tuple(data.get("trace", ())),
            reason=str(data.get("reason", "")),
            feasibility=bool(data.get("feasibility", False)),
        )


# -----------------------------
# Step 1: Rescaling
# -----------------------------

@dataclass(frozen=True)
class UnscaleMap:
    """
    Converts a solution of the rescaled problem (x = s x') back to original
    units: bound * s^p, c_j * s^(p - e_j), Q_ij * s^(p - d_i - d_j).
    """

    scale: Fraction
    target_degree: int = 0
    free_degrees: Tuple[int, ...] = ()
    block_degrees: Tuple[Tuple[int, ...], ...] = ()

    @classmethod
    def identity(cls) -> "UnscaleMap":
        return cls(Fraction(1))

    @property
    def is_identity(self) -> bool:
        return self.scale == 1

    def _factor(self, power: int):
        return self.scale ** power

    def bound(self, value: Union[float, Fraction]) -> Union[float, Fraction]:
        if self.is_identity:
            return value
        factor = self._factor(self.target_degree)
        return value * factor if isinstance(value, Fraction) else float(value) * float(factor)

    def moment(self, value: float, degree: int) -> float:
        """A moment of state degree k measured in scaled units, back in original units."""
        return float(value) * float(self.scale) ** degree

    def free(self, values: Sequence[float]) -> List[float]:
        if self.is_identity:
            return list(values)
        return [float(v) * float(self._factor(self.target_degree - e)) for v, e in zip(values, self.free_degrees)]

    def blocks(self, blocks: Sequence[np.ndarray]) -> List[np.ndarray]:
        if self.is_identity:
            return [np.array(b, dtype=float) for b in blocks]
        out = []
        s = float(self.scale)
        for b, degs in zip(blocks, self.block_degrees):
            d = np.asarray(degs, dtype=float)
            out.append(np.asarray(b, dtype=float) * s ** (self.target_degree - d[:, None] - d[None, :]))
        return out

    def solution(self, sol: SDPSolution, free_names: Sequence[str]) -> SDPSolution:
        """The solution in original units (residual diagnostics stay as solved)."""
        if self.is_identity:
            return sol
        free = self.free([sol.free_scalars[n] for n in free_names])
        return SDPSolution(
            status=sol.status,
            gram_blocks=tuple(self.blocks(sol.gram_blocks)),
            block_labels=sol.block_labels,
            free_scalars=dict(zip(free_names, free)),
            objective_value=sol.objective_value if sol.feasibility else float(self.bound(sol.objective_value)),
            primal_objective=sol.primal_objective,
            dual_objective=sol.dual_objective,
            duality_gap=sol.duality_gap,
            primal_residual=sol.primal_residual,
            dual_residual=sol.dual_residual,
            min_eigenvalue=sol.min_eigenvalue,
            iterations=sol.iterations,
            dual=sol.dual,
            trace=sol.trace,
            reason=sol.reason,
            feasibility=sol.feasibility,
        )


def rescale_problem(inst: SDPInstance, state_scale: Union[int, float, Fraction, str]) -> Tuple[SDPInstance, UnscaleMap]:
    """
    The SDP for the dynamics in x' = x / s, plus the map back.

    A row matching a monomial of state degree k has its free coefficient for
    an unknown of degree e_j multiplied by s^(k - e_j) and its right-hand side
    by s^(k - p); Gram coefficients are unchanged.
    """
    scale = Fraction(state_scale) if not isinstance(state_scale, float) else Fraction(repr(state_scale))
    if scale <= 0:
        raise ValueError(f"state_scale must be > 0, got {state_scale}")
    if scale == 1:
        return inst, UnscaleMap.identity()
    if inst.structurally_infeasible:
        return inst, UnscaleMap(scale)
    degrees = [inst.target_degree, *inst.free_degrees] + [d for block in inst.block_degrees for d in block]
    if any(d is None for d in degrees):
        raise ValueError("Rescaling needs phi, every V term and every basis element to be state-homogeneous.")

    s = float(scale)
    p = int(inst.target_degree)
    constraints = []
    for c in inst.constraints:
        k = c.degree
        constraints.append(
            SDPConstraint(
                blocks=c.blocks,
                free=tuple(g * s ** (k - e) for g, e in zip(c.free, inst.free_degrees)),
                rhs=c.rhs * s ** (k - p),
                degree=k,
            )
        )
    scaled = SDPInstance(
        block_dims=inst.block_dims,
        block_labels=inst.block_labels,
        constraints=tuple(constraints),
        free_names=inst.free_names,
        objective=inst.objective,
        objective_sign=inst.objective_sign,
        feasibility=inst.feasibility,
        free_degrees=inst.free_degrees,
        block_degrees=inst.block_degrees,
        target_degree=inst.target_degree,
        state_scale=inst.state_scale * s,
    )
    unscale = UnscaleMap(
        scale=scale,
        target_degree=p,
        free_degrees=tuple(int(e) for e in inst.free_degrees),
        block_degrees=tuple(tuple(int(d) for d in block) for block in inst.block_degrees),
    )
    logger.info("rescaled problem by %s (target degree %d)", scale, p)
    return scaled, unscale


# -----------------------------
# Step 2: Dense problem data
# -----------------------------

@dataclass
class _Dense:
    dims: List[int]
    A: List[np.ndarray]      # per block, shape (m, n, n), symmetric slices
    F: np.ndarray            # (m, k)
    b: np.ndarray            # (m,)
    c: np.ndarray            # (k,)
    n_user_blocks: int
    n_user_free: int
    margin_index: Optional[int] = None

    @property
    def m(self) -> int:
        return self.b.shape[0]

    def apply(self, X: Sequence[np.ndarray]) -> np.ndarray:
        out = np.zeros(self.m)
        for A, Xb in zip(self.A, X):
            out += np.einsum("kij,ij->k", A, Xb)
        return out

    def adjoint(self, y: np.ndarray) -> List[np.ndarray]:
        return [np.einsum("k,kij->ij", y, A) for A in self.A]


def _densify(inst: SDPInstance) -> _Dense:
    m = inst.n_constraints
    dims = list(inst.block_dims)
    A = [np.zeros((m, n, n)) for n in dims]
    F = np.zeros((m, len(inst.free_names)))
    b = np.zeros(m)
    for k, con in enumerate(inst.constraints):
        for blk, entries in enumerate(con.blocks):
            for i, j, v in entries:
                A[blk][k, i, j] = v
                A[blk][k, j, i] = v
        F[k, :] = con.free
        b[k] = con.rhs
    c = np.asarray(inst.objective, dtype=float)
    data = _Dense(dims, A, F, b, c, n_user_blocks=len(dims), n_user_free=len(inst.free_names))
    if inst.feasibility:
        data = _with_margin(data)
    return data


def _with_margin(data: _Dense) -> _Dense:
    """
    Feasibility form: X = X' + t I with t free, maximise t, and cap t by
    t + slack = 1 with a 1x1 slack block so the problem stays bounded.
    """
    m = data.m
    trace_col = np.array([sum(np.trace(A[k]) for A in data.A) for k in range(m)])
    F = np.zeros((m + 1, data.F.shape[1] + 1))
    F[:m, : data.F.shape[1]] = data.F
    F[:m, -1] = trace_col
    F[m, -1] = 1.0
    A = [np.concatenate([Ab, np.zeros((1,) + Ab.shape[1:])], axis=0) for Ab in data.A]
    slack = np.zeros((m + 1, 1, 1))
    slack[m, 0, 0] = 1.0
    A.append(slack)
    b = np.append(data.b, 1.0)
    c = np.zeros(F.shape[1])
    c[-1] = -1.0
    return _Dense(
        dims=data.dims + [1],
        A=A,
        F=F,
        b=b,
        c=c,
        n_user_blocks=data.n_user_blocks,
        n_user_free=data.n_user_free,
        margin_index=F.shape[1] - 1,
    )


# -----------------------------
# Step 3: Linear algebra helpers
# -----------------------------

def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _nt_scaling(X: np.ndarray, Z: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """G with G G^T = W (W Z W = X), its inverse, and the scaled point lambda."""
    Lx = cholesky(X, lower=True)
    Lz = cholesky(Z, lower=True)
    _, s, Vt = svd(Lz.T @ Lx)
    root = np.sqrt(s)
    G = (Lx @ Vt.T) / root
    Lx_inv = solve_triangular(Lx, np.eye(X.shape[0]), lower=True)
    G_inv = root[:, None] * (Vt @ Lx_inv)
    return G, G_inv, s


def _max_step(X: Sequence[np.ndarray], dX: Sequence[np.ndarray], fraction: float) -> float:
    alpha = np.inf
    for Xb, dXb in zip(X, dX):
        L = cholesky(Xb, lower=True)
        half = solve_triangular(L, dXb, lower=True)
        scaled = solve_triangular(L, half.T, lower=True)
        lam = eigvalsh(_sym(scaled))[0]
        if lam < 0:
            alpha = min(alpha, -1.0 / lam)
    return float(min(1.0, fraction * alpha))


def _inner(X: Sequence[np.ndarray], Z: Sequence[np.ndarray]) -> float:
    return float(sum(np.sum(a * b) for a, b in zip(X, Z)))


class _KKT:
    """[[M, F], [F^T, 0]] factored once per iteration, solved twice."""

    def __init__(self, M: np.ndarray, F: np.ndarray) -> None:
        m, k = F.shape
        K = np.zeros((m + k, m + k))
        K[:m, :m] = M
        K[:m, m:] = F
        K[m:, :m] = F.T
        self.K = K
        self.m = m
        with np.errstate(all="ignore"):
            self.lu = lu_factor(K, check_finite=False)

    def solve(self, r1: np.ndarray, r2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        rhs = np.concatenate([r1, r2])
        with np.errstate(all="ignore"):
            sol = lu_solve(self.lu, rhs, check_finite=False)
        bad = not np.all(np.isfinite(sol))
        if not bad:
            err = np.linalg.norm(self.K @ sol - rhs)
            bad = err > 1e-6 * (1.0 + np.linalg.norm(rhs))
        if bad:
            sol = np.linalg.lstsq(self.K, rhs, rcond=None)[0]
        return sol[: self.m], sol[self.m :]


# -----------------------------
# Step 4: The interior-point loop
# -----------------------------

@dataclass
class _Iterate:
    X: List[np.ndarray]
    Z: List[np.ndarray]
    y: np.ndarray
    w: np.ndarray


def _initial_point(data: _Dense) -> _Iterate:
    n_total = sum(data.dims)
    norms = [
        np.sqrt(sum(np.sum(A[k] ** 2) for A in data.A)) for k in range(data.m)
    ]
    xi = max(10.0, np.sqrt(n_total), max((1 + abs(bk)) / (1 + nk) for bk, nk in zip(data.b, norms)))
    eta = max(10.0, np.sqrt(n_total), max(norms, default=0.0))
    return _Iterate(
        X=[xi * np.eye(n) for n in data.dims],
        Z=[eta * np.eye(n) for n in data.dims],
        y=np.zeros(data.m),
        w=np.zeros(data.F.shape[1]),
    )


def _measures(data: _Dense, it: _Iterate) -> Dict[str, float]:
    Rp = data.b - data.apply(it.X) - data.F @ it.w
    AtY = data.adjoint(it.y)
    Rd = [-a - z for a, z in zip(AtY, it.Z)]
    Rf = data.c - data.F.T @ it.y
    pobj = float(data.c @ it.w)
    dobj = float(data.b @ it.y)
    xz = _inner(it.X, it.Z)
    pres = float(np.linalg.norm(Rp) / (1 + np.linalg.norm(data.b)))
    dres = float(
        np.sqrt(sum(np.sum(r**2) for r in Rd) + np.sum(Rf**2)) / (1 + np.linalg.norm(data.c))
    )
    relgap = max(abs(pobj - dobj), xz) / (1 + abs(pobj) + abs(dobj))
    return {
        "pobj": pobj,
        "dobj": dobj,
        "xz": xz,
        "mu": xz / sum(data.dims),
        "relgap": float(relgap),
        "pres": pres,
        "dres": dres,
        "_Rp": Rp,
        "_Rd": Rd,
        "_Rf": Rf,
    }


def _newton_step(data: _Dense, it: _Iterate, meas: Mapping, settings: SolverSettings) -> Tuple[_Iterate, float, float, float]:
    scalings = [_nt_scaling(X, Z) for X, Z in zip(it.X, it.Z)]
    W = [G @ G.T for G, _, _ in scalings]

    M = np.zeros((data.m, data.m))
    for A, Wb in zip(data.A, W):
        WAW = Wb @ A @ Wb
        M += np.einsum("kij,lij->kl", A, WAW)
    kkt = _KKT(_sym(M), data.F)

    Rp, Rd, Rf, mu = meas["_Rp"], meas["_Rd"], meas["_Rf"], meas["mu"]

    def direction(Rc: Sequence[np.ndarray]):
        base = []
        for (G, _, lam), Rcb, Wb, Rdb in zip(scalings, Rc, W, Rd):
            Rs = Rcb / (lam[:, None] + lam[None, :])
            base.append(G @ Rs @ G.T - Wb @ Rdb @ Wb)
        dy, dw = kkt.solve(Rp - data.apply(base), Rf)
        AtDy = data.adjoint(dy)
        dX = [_sym(bb + Wb @ a @ Wb) for bb, Wb, a in zip(base, W, AtDy)]
        dZ = [_sym(r - a) for r, a in zip(Rd, AtDy)]
        return dX, dZ, dy, dw

    # predictor
    Rc_aff = [np.diag(-2.0 * lam**2) for _, _, lam in scalings]
    dX, dZ, dy, dw = direction(Rc_aff)
    ap = _max_step(it.X, dX, 1.0)
    ad = _max_step(it.Z, dZ, 1.0)
    mu_aff = _inner(
        [X + ap * d for X, d in zip(it.X, dX)], [Z + ad * d for Z, d in zip(it.Z, dZ)]
    ) / sum(data.dims)
    sigma = float(min(1.0, max(0.0, mu_aff / mu) ** 3)) if mu > 0 else 0.0

    # corrector
    Rc = []
    for (G, G_inv, lam), dXb, dZb in zip(scalings, dX, dZ):
        dXs = G_inv @ dXb @ G_inv.T
        dZs = G.T @ dZb @ G
        Rc.append(2 * sigma * mu * np.eye(len(lam)) - np.diag(2.0 * lam**2) - (dXs @ dZs + dZs @ dXs))
    dX, dZ, dy, dw = direction(Rc)
    ap = _max_step(it.X, dX, settings.step_fraction)
    ad = _max_step(it.Z, dZ, settings.step_fraction)

    nxt = _Iterate(
        X=[_sym(X + ap * d) for X, d in zip(it.X, dX)],
        Z=[_sym(Z + ad * d) for Z, d in zip(it.Z, dZ)],
        y=it.y + ad * dy,
        w=it.w + ap * dw,
    )
    return nxt, ap, ad, sigma


def _merit(meas: Mapping, settings: SolverSettings) -> float:
    return max(
        meas["relgap"] / settings.gap_tolerance,
        meas["pres"] / settings.feasibility_tolerance,
        meas["dres"] / settings.feasibility_tolerance,
    )


def _package(
    inst: SDPInstance,
    data: _Dense,
    it: _Iterate,
    meas: Mapping,
    status: str,
    iterations: int,
    trace: List[Dict[str, float]],
    reason: str,
    settings: SolverSettings,
) -> SDPSolution:
    blocks = [_sym(X) for X in it.X[: data.n_user_blocks]]
    margin = None
    if data.margin_index is not None:
        margin = float(it.w[data.margin_index])
        blocks = [X + margin * np.eye(X.shape[0]) for X in blocks]
    min_eig = min((float(eigvalsh(X)[0]) for X in blocks), default=0.0)
    free = {name: float(v) for name, v in zip(inst.free_names, it.w[: data.n_user_free])}

    if status == "optimal":
        tol = settings.feasibility_tolerance
        if margin is not None:
            if margin < -10 * tol:
                status, reason = "infeasible", f"largest achievable minimum eigenvalue is {margin:.3e}"
            elif margin < 10 * tol:
                status = "marginal"
        elif min_eig < 10 * tol:
            status = "marginal"

    objective = margin if margin is not None else inst.objective_sign * float(np.dot(inst.objective, it.w[: data.n_user_free]))
    return SDPSolution(
        status=status,
        gram_blocks=tuple(blocks),
        block_labels=inst.block_labels,
        free_scalars=free,
        objective_value=float(objective),
        primal_objective=float(meas["pobj"]),
        dual_objective=float(meas["dobj"]),
        duality_gap=float(meas["relgap"]),
        primal_residual=float(meas["pres"]),
        dual_residual=float(meas["dres"]),
        min_eigenvalue=min_eig,
        iterations=iterations,
        dual=np.array(it.y[: inst.n_constraints]),
        trace=tuple(trace),
        reason=reason,
        feasibility=inst.feasibility,
    )


def _failed(inst: SDPInstance, status: str, reason: str) -> SDPSolution:
    return SDPSolution(
        status=status,
        gram_blocks=tuple(np.zeros((n, n)) for n in inst.block_dims),
        block_labels=inst.block_labels,
        free_scalars={name: 0.0 for name in inst.free_names},
        objective_value=float("nan"),
        primal_objective=float("nan"),
        dual_objective=float("nan"),
        duality_gap=float("inf"),
        primal_residual=float("inf"),
        dual_residual=float("inf"),
        min_eigenvalue=float("nan"),
        iterations=0,
        reason=reason,
        feasibility=inst.feasibility,
    )


def solve(inst: SDPInstance, settings: Optional[SolverSettings] = None) -> SDPSolution:
    settings = settings or SolverSettings()
    if inst.structurally_infeasible:
        return _failed(inst, "infeasible", inst.reason or "structurally infeasible")
    if inst.n_constraints == 0:
        raise ValueError("SDP instance has no constraints.")
    if not inst.block_dims or min(inst.block_dims) < 1:
        raise ValueError(f"Block dimensions must be >= 1, got {inst.block_dims}")

    data = _densify(inst)
    it = _initial_point(data)
    trace: List[Dict[str, float]] = []
    best: Optional[Tuple[float, _Iterate, Dict, int]] = None
    stalls = 0

    for k in range(settings.max_iterations + 1):
        meas = _measures(data, it)
        record = {key: meas[key] for key in ("pobj", "dobj", "relgap", "pres", "dres", "mu")}
        record["iteration"] = k
        merit = _merit(meas, settings)
        if best is None or merit < best[0]:
            best = (merit, it, meas, k)

        if merit <= 1.0:
            trace.append(record)
            logger.info("converged in %d iterations (gap %.2e)", k, meas["relgap"])
            return _package(inst, data, it, meas, "optimal", k, trace, "", settings)

        size = max(np.linalg.norm(it.y), max(np.linalg.norm(X) for X in it.X))
        if not np.isfinite(size) or size > settings.divergence_limit:
            trace.append(record)
            logger.info("iterates diverged after %d iterations", k)
            return _package(inst, data, it, meas, "infeasible", k, trace, "iterates diverged", settings)

        if k == settings.max_iterations:
            trace.append(record)
            break

        try:
            it_next, ap, ad, sigma = _newton_step(data, it, meas, settings)
        except (LinAlgError, ValueError, FloatingPointError) as e:
            trace.append(record)
            logger.info("newton step failed at iteration %d: %s", k, e)
            return _stalled(inst, data, best, trace, settings, f"linear algebra failure: {e}")

        record.update({"step_primal": ap, "step_dual": ad, "sigma": sigma})
        trace.append(record)
        logger.debug(
            "iter %3d pobj %+.10e dobj %+.10e gap %.2e pres %.2e dres %.2e ap %.3f ad %.3f",
            k, meas["pobj"], meas["dobj"], meas["relgap"], meas["pres"], meas["dres"], ap, ad,
        )
        stalls = stalls + 1 if max(ap, ad) < 1e-8 else 0
        if stalls >= 3:
            return _stalled(inst, data, best, trace, settings, "step lengths collapsed")
        it = it_next

    merit, it_best, meas_best, k_best = best
    logger.warning("iteration limit %d reached", settings.max_iterations)
    return _package(
        inst, data, it_best, meas_best, "numerical-failure", settings.max_iterations, trace,
        "iteration limit reached", settings,
    )


def _stalled(inst, data, best, trace, settings: SolverSettings, why: str) -> SDPSolution:
    _, it, meas, k = best
    near = max(meas["relgap"], meas["pres"], meas["dres"]) <= settings.stall_tolerance
    status = "marginal" if near else "numerical-failure"
    reason = f"{why}; best iterate {k} accepted" if near else why
    if not near:
        logger.warning("solver stalled: %s", why)
    return _package(inst, data, it, meas, status, len(trace), trace, reason, settings)


# -----------------------------
# Step 5: Files
# -----------------------------

def write_solution(sol: SDPSolution, path: Path) -> Path:
    from utils import write_report

    return write_report(path, sol.to_record())


def load_solution(path: Path) -> SDPSolution:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Solution file not found at {p}.")
    with p.open("r", encoding="utf-8") as f:
        return SDPSolution.from_record(json.load(f))
