"""
run_bounds.py

Pipeline drivers behind the CLI subcommands.

- bound:      formulate -> solve -> certify one moment bound
- certify:    build, verify and write a built-in certificate
- verify:     check a certificate file exactly (no solver)
- average:    long-time averages on a chaotic trajectory
- orbit:      periodic orbit and its one-period averages
- relations:  exact relations between mean moments
- region:     where the built-in certificates exist

Each driver returns a JSON-ready report dict with a record_type and a config
echo. Failures inside a stage surface as StageError naming the stage.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence

import pandas as pd

from certify import (
    DEFAULT_DENOMINATOR_LIMIT,
    DEFAULT_PADDING_SCHEDULE,
    enclose_lower,
    enclose_upper,
    load_certificate,
    sos_decompose,
    specialize,
    verify_certificate,
    write_certificate,
)
from dynsim import OrbitSettings, TrajectoryConfig, find_periodic_orbit, orbit_average, time_average
from lorenz import (
    LorenzParams,
    MomentSpec,
    moment_relations,
    builtin_certificate,
    gamma2_interval,
    gamma_feasible,
    moment_problem,
    normalize,
    z3_region_bounds,
)
from polyalg import as_rational, to_text
from sdpsolve import SolverSettings, solve, write_solution
from sosform import dump_problem, to_sdp
from utils import read_json


logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException) -> None:
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


@contextmanager
def stage(name: str) -> Iterator[None]:
    logger.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except (ValueError, KeyError, RuntimeError, ArithmeticError, FileNotFoundError) as e:
        raise StageError(name, e) from e


@dataclass(frozen=True)
class RunConfig:
    system: LorenzParams = field(default_factory=LorenzParams)
    solver: SolverSettings = field(default_factory=SolverSettings)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    orbit: OrbitSettings = field(default_factory=OrbitSettings)
    denominator_limit: int = DEFAULT_DENOMINATOR_LIMIT
    padding_schedule: tuple = DEFAULT_PADDING_SCHEDULE
    rescale: Fraction = Fraction(20)

    def __post_init__(self) -> None:
        object.__setattr__(self, "rescale", as_rational(self.rescale))
        if self.rescale <= 0:
            raise ValueError(f"rescale must be > 0, got {self.rescale}")
        if self.denominator_limit < 1:
            raise ValueError(f"denominator_limit must be >= 1, got {self.denominator_limit}")

    @classmethod
    def from_config(cls, cfg: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        cfg = dict(cfg or {})
        certify_block = dict(cfg.get("certify") or {})
        accepted = ["denominator_limit", "padding_schedule"]
        unknown = sorted(set(certify_block) - set(accepted))
        if unknown:
            raise ValueError(f"Unknown certify settings {unknown}. Expected one of: {accepted}")
        orbit_block = dict(cfg.get("orbit") or {})
        orbit_fields = OrbitSettings.__dataclass_fields__
        unknown = sorted(set(orbit_block) - set(orbit_fields))
        if unknown:
            raise ValueError(f"Unknown orbit settings {unknown}. Expected one of: {sorted(orbit_fields)}")
        return cls(
            system=LorenzParams.from_config(cfg.get("system")),
            solver=SolverSettings.from_config(cfg.get("solver")),
            trajectory=TrajectoryConfig.from_config(cfg.get("trajectory")),
            orbit=OrbitSettings(**{k: (int(v) if k == "max_restarts" else float(v)) for k, v in orbit_block.items()}),
            denominator_limit=int(certify_block.get("denominator_limit", DEFAULT_DENOMINATOR_LIMIT)),
            padding_schedule=tuple(str(v) for v in certify_block.get("padding_schedule", DEFAULT_PADDING_SCHEDULE)),
            rescale=str(cfg.get("rescale", 20)),
        )

    def echo(self) -> Dict[str, Any]:
        return {
            "system": self.system.to_dict(),
            "solver": dict(vars(self.solver)),
            "trajectory": self.trajectory.to_dict(),
            "denominator_limit": self.denominator_limit,
            "padding_schedule": list(self.padding_schedule),
            "rescale": self.rescale,
        }


def _normalized_or_none(value, spec: MomentSpec, p: LorenzParams):
    if value is None:
        return None
    try:
        return normalize(value, spec, p)
    except ValueError:
        return None


# -----------------------------
# Step 1: Bounds
# -----------------------------

def cmd_bound(
    cfg: RunConfig,
    spec: MomentSpec,
    degree: int,
    sense: str = "upper",
    rescale: Optional[Fraction] = None,
    export_problem: Optional[Path] = None,
    solution_out: Optional[Path] = None,
    certificate_out: Optional[Path] = None,
) -> Dict[str, Any]:
    """
    Bound mean(spec) with V of the given degree in coordinates x = s x'. The
    scaled bound is certified exactly, then mapped back by s^deg(spec).
    """
    p = cfg.system
    s = as_rational(rescale) if rescale is not None else cfg.rescale
    factor = s ** spec.degree

    with stage("formulate"):
        g = moment_problem(p, spec, degree, sense, s)
        inst = to_sdp(g)
    if export_problem is not None:
        dump_problem(inst, export_problem)

    with stage("solve"):
        sol = solve(inst, cfg.solver)
    if solution_out is not None:
        write_solution(sol, solution_out)

    report: Dict[str, Any] = {
        "record_type": "bound",
        "moment": spec.name,
        "degree": degree,
        "sense": sense,
        "rescale": s,
        "solver_status": sol.status,
        "solver_reason": sol.reason,
        "iterations": sol.iterations,
        "numeric_optimum": float(sol.objective_value) * float(factor) if sol.usable else None,
        "verified": False,
        "verified_bound": None,
        "enclosure": None,
        "config": cfg.echo(),
    }
    report["normalized_optimum"] = _normalized_or_none(report["numeric_optimum"], spec, p)
    if not sol.usable:
        logger.warning("no usable solution for %s at degree %d: %s", spec, degree, sol.status)
        report["normalized_bound"] = None
        return report

    with stage("certify"):
        enclose = enclose_upper if sense == "upper" else enclose_lower
        enc = enclose(
            g,
            sol,
            cfg.padding_schedule,
            denominator_limit=cfg.denominator_limit,
            settings=cfg.solver,
            name=f"{spec.name}-{sense}-deg{degree}",
            state_scale=s,
            system=p.to_dict(),
        )
    report["enclosure"] = enc.to_record()
    if enc.verified:
        bound = enc.certificate.original_bound
        report["verified"] = True
        report["verified_bound"] = bound
        report["verified_bound_float"] = float(bound)
        if certificate_out is not None:
            write_certificate(enc.certificate, certificate_out)
    report["normalized_bound"] = _normalized_or_none(report["verified_bound"], spec, p)
    return report


# -----------------------------
# Step 2: Certificates
# -----------------------------

def _verification_record(cert, verification) -> Dict[str, Any]:
    return {
        "name": cert.name,
        "sense": cert.sense,
        "bound": to_text(cert.bound),
        "system": dict(cert.system),
        "ok": verification.ok,
        "reason": verification.reason,
        "identity_holds": verification.identity_holds,
        "psd": {
            label: {
                "psd": r.psd,
                "nonsingular": r.nonsingular,
                "violated_index": r.violated_index,
                "charpoly": list(r.charpoly),
            }
            for label, r in verification.psd.items()
        },
    }


def cmd_certify(
    cfg: RunConfig,
    name: str,
    gamma: Optional[Sequence] = None,
    r: Optional[Fraction] = None,
    output: Optional[Path] = None,
) -> Dict[str, Any]:
    with stage("build"):
        cert = builtin_certificate(name, cfg.system, tuple(gamma) if gamma else None)
        if r is not None:
            cert = specialize(cert, r)
    with stage("verify"):
        verification = verify_certificate(cert)
    if output is not None and verification.ok:
        write_certificate(cert, output)
    report = {"record_type": "certify", **_verification_record(cert, verification), "config": cfg.echo()}
    if verification.ok:
        report["squares"] = [[w, to_text(q)] for w, q in sos_decompose(cert)]
    return report


def cmd_verify(path: Path) -> Dict[str, Any]:
    """Exact check of a certificate file. Never touches the solver."""
    with stage("load"):
        cert = load_certificate(path)
    with stage("verify"):
        verification = verify_certificate(cert)
    report = {"record_type": "verify", "path": str(path), **_verification_record(cert, verification)}
    if cert.state_scale != 1 and cert.phi.is_state_homogeneous():
        report["original_bound"] = cert.original_bound
    return report


# -----------------------------
# Step 3: Trajectory oracles
# -----------------------------

def cmd_average(cfg: RunConfig, moments: Sequence[MomentSpec], t_total: Optional[float] = None) -> Dict[str, Any]:
    traj = cfg.trajectory
    if t_total is not None:
        traj = TrajectoryConfig(traj.initial_state, traj.dt, float(t_total), traj.t_transient)
    with stage("integrate"):
        report = time_average(cfg.system, moments, traj)
    record = report.to_record()
    record["config"] = {**cfg.echo(), "trajectory": traj.to_dict()}
    return record


def cmd_orbit(
    cfg: RunConfig,
    symbols: str,
    moments: Sequence[MomentSpec],
    states_csv: Optional[Path] = None,
) -> Dict[str, Any]:
    with stage("shoot"):
        orbit = find_periodic_orbit(cfg.system, symbols, cfg.orbit)
    with stage("average"):
        averages = orbit_average(orbit, moments, cfg.system)
    if states_csv is not None:
        states_csv.parent.mkdir(parents=True, exist_ok=True)
        orbit.to_frame().to_csv(states_csv, index=False)
    record = orbit.to_record()
    record["averages"] = averages.to_record()
    record["config"] = cfg.echo()
    return record


# -----------------------------
# Step 4: Relations and regions
# -----------------------------

def cmd_relations(cfg: RunConfig, averages_path: Optional[Path] = None, param: str = "r") -> Dict[str, Any]:
    with stage("relations"):
        table = moment_relations(cfg.system, param)
    record: Dict[str, Any] = {
        "record_type": "relations",
        "relations": [rel.text() for rel in table.relations],
        "chain": {
            spec.name: {base.name: to_text(c) for base, c in terms}
            for spec, terms in table.chain.items()
        },
        "config": cfg.echo(),
    }
    if averages_path is not None:
        with stage("residuals"):
            data = read_json(averages_path)
            raw = data.get("raw") or data.get("averages", {}).get("raw")
            if not raw:
                raise ValueError(f"{averages_path} has no averages (expected an average or orbit report)")
            record["residuals"] = table.residuals(raw)
            record["averages_source"] = data.get("source") or data.get("averages", {}).get("source")
    return record


def cmd_region(
    cfg: RunConfig,
    betas: Sequence[Fraction],
    sigma: Optional[Fraction] = None,
    csv_out: Optional[Path] = None,
    limits: bool = False,
) -> Dict[str, Any]:
    """Which built-in certificates exist at each beta (sigma fixed)."""
    sigma = as_rational(sigma) if sigma is not None else cfg.system.sigma
    rows: List[Dict[str, Any]] = []
    with stage("region"):
        for beta in betas:
            beta = as_rational(beta)
            z3 = gamma_feasible(beta, sigma)
            rows.append(
                {
                    "beta": beta,
                    "sigma": sigma,
                    "z2": beta > 0,
                    "xy3": beta > 0 and beta * beta - 12 * beta + 4 <= 0,
                    "z3": z3.status,
                    "gamma1": z3.witness[0] if z3.witness else None,
                    "gamma2": z3.witness[1] if z3.witness else None,
                    "margin": z3.margin,
                }
            )
    record: Dict[str, Any] = {"record_type": "region", "rows": rows, "config": cfg.echo()}
    if limits:
        with stage("limits"):
            lower, upper = z3_region_bounds(sigma)
            interval = gamma2_interval(cfg.system.beta, sigma)
        record["z3_beta_lower"] = lower
        record["z3_beta_upper"] = upper
        record["gamma2_interval"] = list(interval) if interval else None
    if csv_out is not None:
        frame = pd.DataFrame(rows)
        for col in ("beta", "sigma", "gamma1", "gamma2"):
            frame[col] = frame[col].map(lambda v: None if v is None else str(v))
        csv_out.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(csv_out, index=False)
    return record


def beta_grid(start: Fraction, stop: Fraction, count: int) -> List[Fraction]:
    """count rational points from start to stop inclusive."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    start, stop = as_rational(start), as_rational(stop)
    if count == 1:
        return [start]
    step = (stop - start) / (count - 1)
    return [start + k * step for k in range(count)]
