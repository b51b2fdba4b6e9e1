"""
dynsim.py

Trajectory and periodic-orbit oracles for the Lorenz system. These give the
measured averages that bounds are compared against.

Responsibilities:
- rk4_step: one classical Runge-Kutta step for any vector field.
- time_average: long RK4 run (numba kernel) with trapezoidal averaging of
  monomials after a transient.
- find_periodic_orbit: multiple shooting on the upward section z = r - 1,
  for the symbol sequences "+-" and "++-".
- orbit_average: one-period averages along a converged orbit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numba import njit
from scipy.integrate import solve_ivp
from scipy.optimize import root

from lorenz import LorenzParams, MomentSpec, normalize
from polyalg import Poly


logger = logging.getLogger(__name__)

VALID_SYMBOLS = ("+-", "++-")


class IntegrationBlowupError(FloatingPointError):
    """The integrated state stopped being finite."""

    def __init__(self, step: int, t: float) -> None:
        self.step = step
        self.t = t
        super().__init__(f"non-finite state after step {step} (t = {t:g}); reduce dt")


class OrbitNotFoundError(RuntimeError):
    pass


# -----------------------------
# Step 1: Runge-Kutta
# -----------------------------

def rk4_step(f: Callable[[np.ndarray], np.ndarray], state, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    u = np.asarray(state, dtype=float)
    k1 = np.asarray(f(u), dtype=float)
    k2 = np.asarray(f(u + 0.5 * dt * k1), dtype=float)
    k3 = np.asarray(f(u + 0.5 * dt * k2), dtype=float)
    k4 = np.asarray(f(u + dt * k3), dtype=float)
    out = u + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6
    if not np.all(np.isfinite(out)):
        raise IntegrationBlowupError(1, dt)
    return out


def lorenz_rhs(p: LorenzParams) -> Callable[[np.ndarray], np.ndarray]:
    if p.symbolic:
        raise ValueError("Integration needs a numeric r.")
    beta, sigma, r = float(p.beta), float(p.sigma), float(p.r)

    def f(u: np.ndarray) -> np.ndarray:
        x, y, z = u
        return np.array([sigma * (y - x), r * x - y - x * z, x * y - beta * z])

    return f


@njit(cache=True)
def _rk4_lorenz(x, y, z, dt, beta, sigma, r):
    k1x, k1y, k1z = sigma * (y - x), r * x - y - x * z, x * y - beta * z
    ax, ay, az = x + 0.5 * dt * k1x, y + 0.5 * dt * k1y, z + 0.5 * dt * k1z
    k2x, k2y, k2z = sigma * (ay - ax), r * ax - ay - ax * az, ax * ay - beta * az
    ax, ay, az = x + 0.5 * dt * k2x, y + 0.5 * dt * k2y, z + 0.5 * dt * k2z
    k3x, k3y, k3z = sigma * (ay - ax), r * ax - ay - ax * az, ax * ay - beta * az
    ax, ay, az = x + dt * k3x, y + dt * k3y, z + dt * k3z
    k4x, k4y, k4z = sigma * (ay - ax), r * ax - ay - ax * az, ax * ay - beta * az
    return (
        x + dt * (k1x + 2.0 * k2x + 2.0 * k3x + k4x) / 6.0,
        y + dt * (k1y + 2.0 * k2y + 2.0 * k3y + k4y) / 6.0,
        z + dt * (k1z + 2.0 * k2z + 2.0 * k3z + k4z) / 6.0,
    )


@njit(cache=True)
def _monomials(x, y, z, exps, out):
    for k in range(exps.shape[0]):
        v = 1.0
        for _ in range(exps[k, 0]):
            v *= x
        for _ in range(exps[k, 1]):
            v *= y
        for _ in range(exps[k, 2]):
            v *= z
        out[k] = v


@njit(cache=True)
def _average_kernel(state0, dt, n_transient, n_avg, beta, sigma, r, exps):
    x, y, z = state0[0], state0[1], state0[2]
    means = np.zeros(exps.shape[0])
    start = np.zeros(3)
    end = np.zeros(3)
    for i in range(n_transient):
        x, y, z = _rk4_lorenz(x, y, z, dt, beta, sigma, r)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            return means, start, end, i + 1
    start[0], start[1], start[2] = x, y, z

    vals = np.zeros(exps.shape[0])
    _monomials(x, y, z, exps, vals)
    sums = 0.5 * vals
    for i in range(n_avg):
        x, y, z = _rk4_lorenz(x, y, z, dt, beta, sigma, r)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            return means, start, end, n_transient + i + 1
        _monomials(x, y, z, exps, vals)
        if i == n_avg - 1:
            sums += 0.5 * vals
        else:
            sums += vals
    end[0], end[1], end[2] = x, y, z
    means = sums / n_avg
    return means, start, end, -1


# -----------------------------
# Step 2: Long-time averages
# -----------------------------

@dataclass(frozen=True)
class TrajectoryConfig:
    initial_state: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    dt: float = 1e-3
    t_total: float = 1e5
    t_transient: float = 100.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "initial_state", tuple(float(v) for v in self.initial_state))
        if len(self.initial_state) != 3:
            raise ValueError(f"initial_state needs 3 entries, got {len(self.initial_state)}")
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not 0 <= self.t_transient < self.t_total:
            raise ValueError(
                f"Need 0 <= t_transient < t_total, got t_transient={self.t_transient}, t_total={self.t_total}"
            )

    @classmethod
    def from_config(cls, block: Optional[Mapping] = None) -> "TrajectoryConfig":
        block = dict(block or {})
        accepted = ["initial_state", "dt", "t_total", "t_transient"]
        unknown = sorted(set(block) - set(accepted))
        if unknown:
            raise ValueError(f"Unknown trajectory settings {unknown}. Expected one of: {accepted}")
        kwargs = {k: float(v) for k, v in block.items() if k != "initial_state"}
        if "initial_state" in block:
            kwargs["initial_state"] = tuple(float(v) for v in block["initial_state"])
        return cls(**kwargs)

    def to_dict(self) -> Dict:
        return {
            "initial_state": list(self.initial_state),
            "dt": self.dt,
            "t_total": self.t_total,
            "t_transient": self.t_transient,
        }


@dataclass(frozen=True)
class AverageReport:
    raw: Dict[MomentSpec, float]
    normalized: Dict[MomentSpec, float]
    horizon: float
    source: str = "trajectory"
    system: Dict[str, str] = field(default_factory=dict)
    start_state: Tuple[float, ...] = ()
    final_state: Tuple[float, ...] = ()

    def by_name(self) -> Dict[str, float]:
        return {m.name: v for m, v in self.raw.items()}

    def to_record(self) -> Dict:
        return {
            "record_type": "average",
            "source": self.source,
            "horizon": self.horizon,
            "system": dict(self.system),
            "raw": {m.name: v for m, v in self.raw.items()},
            "normalized": {m.name: v for m, v in self.normalized.items()},
            "start_state": list(self.start_state),
            "final_state": list(self.final_state),
        }


def _normalized(p: LorenzParams, raw: Mapping[MomentSpec, float]) -> Dict[MomentSpec, float]:
    out: Dict[MomentSpec, float] = {}
    for spec, value in raw.items():
        try:
            out[spec] = normalize(value, spec, p)
        except ValueError:
            continue
    return out


def _monomial_means(p: LorenzParams, exps: np.ndarray, cfg: TrajectoryConfig):
    if p.symbolic:
        raise ValueError("Integration needs a numeric r.")
    n_transient = int(round(cfg.t_transient / cfg.dt))
    n_avg = int(round((cfg.t_total - cfg.t_transient) / cfg.dt))
    if n_avg < 1:
        raise ValueError(f"Averaging window shorter than one step (dt={cfg.dt})")
    means, start, end, failed = _average_kernel(
        np.asarray(cfg.initial_state, dtype=np.float64),
        float(cfg.dt),
        n_transient,
        n_avg,
        float(p.beta),
        float(p.sigma),
        float(p.r),
        np.ascontiguousarray(exps, dtype=np.int64).reshape(-1, 3),
    )
    if failed >= 0:
        raise IntegrationBlowupError(int(failed), failed * cfg.dt)
    return means, tuple(float(v) for v in start), tuple(float(v) for v in end), n_avg * cfg.dt


def time_average(p: LorenzParams, moments: Iterable[MomentSpec], cfg: Optional[TrajectoryConfig] = None) -> AverageReport:
    """Averages of each moment over [t_transient, t_total]. Deterministic for a given cfg."""
    cfg = cfg or TrajectoryConfig()
    moments = list(moments)
    exps = np.array([m.exponents for m in moments], dtype=np.int64).reshape(-1, 3)
    logger.info("averaging %d moments over t in [%g, %g] with dt=%g", len(moments), cfg.t_transient, cfg.t_total, cfg.dt)
    means, start, end, horizon = _monomial_means(p, exps, cfg)
    raw = {m: float(v) for m, v in zip(moments, means)}
    return AverageReport(raw, _normalized(p, raw), horizon, "trajectory", p.to_dict(), start, end)


def average_polys(p: LorenzParams, polys: Sequence[Poly], cfg: Optional[TrajectoryConfig] = None) -> List[float]:
    """Time averages of state-only polynomials, from one run over all their monomials."""
    cfg = cfg or TrajectoryConfig()
    monos = sorted({m for q in polys for m in q.terms})
    if any(len(m) != 3 for m in monos):
        raise ValueError("average_polys takes polynomials in x, y, z only.")
    index = {m: k for k, m in enumerate(monos)}
    means, _, _, _ = _monomial_means(p, np.array(monos, dtype=np.int64).reshape(-1, 3), cfg)
    return [sum(float(c) * means[index[m]] for m, c in q.terms.items()) for q in polys]


# -----------------------------
# Step 3: Periodic orbits
# -----------------------------

@dataclass(frozen=True)
class OrbitSettings:
    harvest_time: float = 400.0
    rtol: float = 1e-12
    residual_tolerance: float = 1e-10
    max_restarts: int = 8
    sample_dt: float = 1e-4
    max_return_time: float = 10.0


@dataclass(frozen=True)
class OrbitResult:
    symbols: str
    period: float
    section_point: Tuple[float, float, float]
    section_points: Tuple[Tuple[float, float, float], ...]
    times: np.ndarray
    states: np.ndarray                      # (N + 1, 3), states[0] == states[-1] up to closure error
    residual: float
    system: Dict[str, str] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "x": self.states[:, 0], "y": self.states[:, 1], "z": self.states[:, 2]})

    def to_record(self) -> Dict:
        return {
            "record_type": "orbit",
            "symbols": self.symbols,
            "period": self.period,
            "section_point": list(self.section_point),
            "section_points": [list(q) for q in self.section_points],
            "residual": self.residual,
            "samples": int(len(self.times)),
            "system": dict(self.system),
        }


def _ivp_rhs(t, u, beta, sigma, r):
    x, y, z = u
    return [sigma * (y - x), r * x - y - x * z, x * y - beta * z]


def _upward_section(z0: float):
    def crossing(t, u, *args):
        return u[2] - z0

    crossing.direction = 1
    return crossing


def _floats(p: LorenzParams) -> Tuple[float, float, float]:
    if p.symbolic:
        raise ValueError("Orbit search needs a numeric r.")
    return float(p.beta), float(p.sigma), float(p.r)


def section_crossings(p: LorenzParams, settings: OrbitSettings = OrbitSettings(), initial_state=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Upward crossings of z = r - 1 along a chaotic run, as rows (x, y, z)."""
    args = _floats(p)
    warm = solve_ivp(_ivp_rhs, (0.0, 50.0), list(initial_state), method="DOP853", args=args, rtol=1e-10, atol=1e-10)
    event = _upward_section(args[2] - 1)
    sol = solve_ivp(
        _ivp_rhs, (0.0, settings.harvest_time), warm.y[:, -1], method="DOP853",
        args=args, events=event, rtol=1e-10, atol=1e-10,
    )
    return np.asarray(sol.y_events[0])


def _return(p_args, z0: float, point: np.ndarray, settings: OrbitSettings) -> Tuple[np.ndarray, float]:
    """First upward return of (x, y, z0) to the section."""
    start = [point[0], point[1], z0]
    skip = 0.05
    first = solve_ivp(_ivp_rhs, (0.0, skip), start, method="DOP853", args=p_args, rtol=settings.rtol, atol=settings.rtol)
    event = _upward_section(z0)
    event.terminal = True
    sol = solve_ivp(
        _ivp_rhs, (skip, settings.max_return_time), first.y[:, -1], method="DOP853",
        args=p_args, events=event, rtol=settings.rtol, atol=settings.rtol,
    )
    if not sol.t_events[0].size:
        raise OrbitNotFoundError(f"no return to the section within t = {settings.max_return_time}")
    return np.asarray(sol.y_events[0][0][:2]), float(sol.t_events[0][0])


def _shooting_residual(u: np.ndarray, p_args, z0: float, n: int, settings: OrbitSettings) -> Tuple[np.ndarray, float]:
    points = u.reshape(n, 2)
    res = np.zeros_like(points)
    period = 0.0
    for k in range(n):
        nxt, t = _return(p_args, z0, points[k], settings)
        res[k] = nxt - points[(k + 1) % n]
        period += t
    return res.ravel(), period


def _symbol(x: float) -> str:
    return "+" if x > 0 else "-"


def find_periodic_orbit(p: LorenzParams, symbols: str = "+-", settings: OrbitSettings = OrbitSettings()) -> OrbitResult:
    """
    Periodic orbit winding in the order given by symbols ("+" around x+, "-"
    around x-). Guesses are close returns among the section crossings of a
    chaotic run; each is refined by multiple shooting with one segment per
    symbol until the closure residual is below tolerance.
    """
    if symbols not in VALID_SYMBOLS:
        raise ValueError(f"Unsupported symbol sequence '{symbols}'. Expected one of: {list(VALID_SYMBOLS)}")
    p_args = _floats(p)
    z0 = p_args[2] - 1
    n = len(symbols)

    crossings = section_crossings(p, settings)
    pts = crossings[:, :2]
    signs = "".join(_symbol(x) for x in pts[:, 0])
    guesses = []
    for k in range(len(pts) - n):
        if signs[k:k + n] == symbols:
            guesses.append((float(np.linalg.norm(pts[k + n] - pts[k])), k))
    guesses.sort()
    if not guesses:
        raise OrbitNotFoundError(f"no crossing sequence '{symbols}' in {len(pts)} section crossings")

    for attempt, (dist, k) in enumerate(guesses[: settings.max_restarts]):
        u0 = pts[k:k + n].ravel()
        logger.debug("orbit %s: attempt %d from close return %.3g", symbols, attempt, dist)
        try:
            sol = root(lambda u: _shooting_residual(u, p_args, z0, n, settings)[0], u0, method="hybr", options={"xtol": 1e-13})
            res, period = _shooting_residual(sol.x, p_args, z0, n, settings)
        except OrbitNotFoundError:
            continue
        residual = float(np.linalg.norm(res))
        points = sol.x.reshape(n, 2)
        found = "".join(_symbol(x) for x in points[:, 0])
        if residual > settings.residual_tolerance or found != symbols:
            logger.debug("orbit %s: rejected (residual %.3g, symbols %s)", symbols, residual, found)
            continue

        n_samples = 2 * int(math.ceil(period / (2 * settings.sample_dt)))
        times = np.linspace(0.0, period, n_samples + 1)
        start = [points[0, 0], points[0, 1], z0]
        track = solve_ivp(
            _ivp_rhs, (0.0, period), start, method="DOP853", args=p_args,
            t_eval=times, rtol=settings.rtol, atol=settings.rtol,
        )
        logger.info("orbit %s: period %.10f, residual %.2e", symbols, period, residual)
        return OrbitResult(
            symbols=symbols,
            period=period,
            section_point=(float(points[0, 0]), float(points[0, 1]), z0),
            section_points=tuple((float(a), float(b), z0) for a, b in points),
            times=times,
            states=track.y.T.copy(),
            residual=residual,
            system=p.to_dict(),
        )
    raise OrbitNotFoundError(f"Newton did not converge for '{symbols}' after {min(len(guesses), settings.max_restarts)} starts")


def orbit_average(orbit: OrbitResult, moments: Iterable[MomentSpec], p: Optional[LorenzParams] = None) -> AverageReport:
    """One-period averages by the periodic trapezoid rule on the uniform samples."""
    p = p or LorenzParams.from_config({k: v for k, v in orbit.system.items()})
    moments = list(moments)
    x, y, z = orbit.states[:, 0], orbit.states[:, 1], orbit.states[:, 2]
    n = len(orbit.times) - 1
    raw: Dict[MomentSpec, float] = {}
    for m in moments:
        vals = x**m.l * y**m.m * z**m.n
        raw[m] = float((vals.sum() - 0.5 * (vals[0] + vals[-1])) / n)
    return AverageReport(
        raw,
        _normalized(p, raw),
        orbit.period,
        f"orbit {orbit.symbols}",
        dict(orbit.system),
        tuple(float(v) for v in orbit.states[0]),
        tuple(float(v) for v in orbit.states[-1]),
    )
