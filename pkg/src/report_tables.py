"""
report_tables.py

Summary table of mean moments against bounds, one row per group of moments
that the exact relations make proportional.

Columns per row (all normalised by the value at the nonzero equilibria):
  chaotic    - long-time average on the chaotic trajectory
  maximum    - largest known mean (equilibria, symmetric periodic orbit)
  bound      - best verified upper bound (built-in certificates, solved SDPs)
  lower      - verified lower bound when a built-in certificate gives one
  gap_pct    - 100 * (bound / maximum - 1)

Any cell whose computation fails is left as None and the failure is listed
under "unavailable".
"""

from __future__ import annotations

import logging
from fractions import Fraction
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

from certify import specialize, verify_certificate
from cli_utils import format_table
from dynsim import IntegrationBlowupError, OrbitNotFoundError, TrajectoryConfig, find_periodic_orbit, orbit_average, time_average
from lorenz import (
    BUILTIN_CERTIFICATES,
    REPORT_GROUPS,
    LorenzParams,
    MomentSpec,
    RegionViolation,
    builtin_certificate,
    normalize,
    parse_moment,
)
from run_bounds import RunConfig, StageError, cmd_bound


logger = logging.getLogger(__name__)

REPORT_KEYS = ("rows", "degrees", "t_total", "orbit", "certificates")
COLUMNS = ("moments", "chaotic", "maximum", "bound", "lower", "gap_pct")


def _report_settings(report_cfg: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    report_cfg = dict(report_cfg or {})
    unknown = sorted(set(report_cfg) - set(REPORT_KEYS))
    if unknown:
        raise ValueError(f"Unknown report settings {unknown}. Expected one of: {list(REPORT_KEYS)}")
    rows = report_cfg.get("rows")
    groups = (
        tuple(tuple(parse_moment(m) for m in row) for row in rows) if rows else REPORT_GROUPS
    )
    certificates = tuple(report_cfg.get("certificates", BUILTIN_CERTIFICATES))
    for name in certificates:
        if name not in BUILTIN_CERTIFICATES:
            raise ValueError(f"Unknown certificate '{name}'. Expected one of: {list(BUILTIN_CERTIFICATES)}")
    return {
        "groups": groups,
        "degrees": tuple(int(d) for d in report_cfg.get("degrees", (2, 4, 6))),
        "t_total": float(report_cfg.get("t_total", 2e4)),
        "orbit": str(report_cfg.get("orbit", "+-")),
        "certificates": certificates,
    }


def builtin_bounds(p: LorenzParams, names: Sequence[str]) -> Dict[MomentSpec, Dict[str, Fraction]]:
    """
    Normalised bounds read off the built-in certificates at numeric r. Each
    certificate bounds c * monomial; the bound on the monomial is bound / c.
    """
    out: Dict[MomentSpec, Dict[str, Fraction]] = {}
    for name in names:
        try:
            cert = specialize(builtin_certificate(name, p), p.r)
        except RegionViolation as e:
            logger.info("certificate %s unavailable: %s", name, e)
            continue
        if not verify_certificate(cert).ok:
            logger.warning("certificate %s failed exact verification at r=%s", name, p.r)
            continue
        (mono, coeff), = cert.phi.items()
        spec = MomentSpec(*mono[:3])
        value = cert.bound_value / coeff
        sense = cert.sense if coeff > 0 else ("lower" if cert.sense == "upper" else "upper")
        try:
            out.setdefault(spec, {})[sense] = normalize(value, spec, p)
        except ValueError:
            out.setdefault(spec, {})[sense + "_raw"] = value
    return out


def _attempt(label: str, unavailable: List[str], fn: Callable[[], Any]) -> Any:
    try:
        return fn()
    except (StageError, IntegrationBlowupError, OrbitNotFoundError, ValueError) as e:
        logger.warning("%s unavailable: %s", label, e)
        unavailable.append(f"{label}: {e}")
        return None


def cmd_report_tables(
    cfg: RunConfig,
    report_cfg: Optional[Mapping[str, Any]] = None,
    on_row: Optional[Callable[[int, int, str, str], None]] = None,
) -> Dict[str, Any]:
    settings = _report_settings(report_cfg)
    p = cfg.system
    groups = settings["groups"]
    moments = [m for row in groups for m in row]
    unavailable: List[str] = []

    traj = cfg.trajectory
    traj = TrajectoryConfig(traj.initial_state, traj.dt, settings["t_total"], traj.t_transient)
    chaotic = _attempt("chaotic averages", unavailable, lambda: time_average(p, moments, traj))
    orbit = _attempt(f"orbit {settings['orbit']}", unavailable, lambda: find_periodic_orbit(p, settings["orbit"], cfg.orbit))
    orbit_means = orbit_average(orbit, moments, p) if orbit is not None else None
    certified = builtin_bounds(p, settings["certificates"])

    rows: List[Dict[str, Any]] = []
    for k, group in enumerate(groups):
        key = group[0]
        row: Dict[str, Any] = {"moments": ", ".join(m.name for m in group)}
        row["chaotic"] = chaotic.normalized.get(key) if chaotic else None
        candidates = [1.0] + ([orbit_means.normalized[key]] if orbit_means else [])
        row["maximum"] = max(candidates)

        bounds: List[float] = []
        lowers: List[float] = []
        sources: List[str] = []
        for member in group:
            for sense, value in certified.get(member, {}).items():
                if sense == "upper":
                    bounds.append(float(value))
                    sources.append(f"certificate:{member.name}")
                elif sense == "lower":
                    lowers.append(float(value))
        for degree in settings["degrees"]:
            result = _attempt(f"bound {key.name} degree {degree}", unavailable, lambda d=degree: cmd_bound(cfg, key, d))
            if result and result.get("verified") and result.get("normalized_bound") is not None:
                bounds.append(float(result["normalized_bound"]))
                sources.append(f"sdp:degree{degree}")
        if bounds:
            best = min(range(len(bounds)), key=bounds.__getitem__)
            row["bound"] = bounds[best]
            row["bound_source"] = sources[best]
            row["gap_pct"] = 100.0 * (row["bound"] / row["maximum"] - 1.0)
        else:
            row["bound"] = row["bound_source"] = row["gap_pct"] = None
        row["lower"] = max(lowers) if lowers else None
        rows.append(row)
        if on_row is not None:
            on_row(k + 1, len(groups), key.name, "ok" if row["bound"] is not None else "unavailable")

    return {
        "record_type": "report",
        "columns": list(COLUMNS),
        "rows": rows,
        "orbit_period": orbit.period if orbit is not None else None,
        "unavailable": unavailable,
        "settings": {**settings, "groups": [[m.name for m in row] for row in groups]},
        "config": cfg.echo(),
    }


def render_report(record: Mapping[str, Any]) -> str:
    return format_table(record["rows"], COLUMNS, title="=== Mean moments and bounds (normalised) ===")
