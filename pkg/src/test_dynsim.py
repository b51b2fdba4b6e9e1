import json
import math
import random

import numpy as np
import pytest
from pytest import mark

from dynsim import (
    AverageReport,
    IntegrationBlowupError,
    OrbitNotFoundError,
    TrajectoryConfig,
    average_polys,
    find_periodic_orbit,
    lorenz_rhs,
    orbit_average,
    rk4_step,
    time_average,
)
from lorenz import STANDARD_MOMENTS, LorenzParams, equilibria, parse_moment, vector_field
from polyalg import Poly, VarSet, lie_derivative, monomials_up_to

STANDARD = LorenzParams()
M = parse_moment


@pytest.fixture(scope="module")
def chaotic():
    cfg = TrajectoryConfig(initial_state=(1, 1, 1), dt=1e-3, t_total=20000, t_transient=100)
    return time_average(STANDARD, STANDARD_MOMENTS, cfg)


@pytest.fixture(scope="module")
def orbit():
    return find_periodic_orbit(STANDARD, "+-")


def test_rk4_keeps_fixed_points():
    f = lorenz_rhs(STANDARD)
    assert np.array_equal(rk4_step(f, [0.0, 0.0, 0.0], 1e-3), np.zeros(3))
    plus = np.array(equilibria(STANDARD)[1])
    assert np.allclose(rk4_step(f, plus, 1e-3), plus, atol=1e-12)


def test_rk4_matches_exponential():
    out = rk4_step(lambda u: -u, [1.0], 0.1)
    assert abs(out[0] - math.exp(-0.1)) < 1e-7


def test_rk4_rejects_bad_step():
    with pytest.raises(ValueError):
        rk4_step(lambda u: -u, [1.0], 0.0)
    with pytest.raises(IntegrationBlowupError):
        rk4_step(lambda u: u * np.inf, [1.0], 0.1)


@mark.parametrize(
    "kwargs",
    [{"dt": 0}, {"t_total": 10, "t_transient": 10}, {"t_transient": -1}, {"initial_state": (1, 2)}],
)
def test_trajectory_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrajectoryConfig(**kwargs)


def test_trajectory_config_from_config():
    cfg = TrajectoryConfig.from_config({"dt": "1e-3", "t_total": 500, "initial_state": [1, 2, 3]})
    assert cfg.dt == 1e-3
    assert cfg.initial_state == (1.0, 2.0, 3.0)
    with pytest.raises(ValueError):
        TrajectoryConfig.from_config({"steps": 10})


def test_average_at_equilibrium():
    cfg = TrajectoryConfig(initial_state=equilibria(STANDARD)[1], dt=1e-3, t_total=10, t_transient=1)
    report = time_average(STANDARD, [M("z"), M("x2"), M("xy")], cfg)
    for spec in (M("z"), M("x2"), M("xy")):
        assert report.normalized[spec] == pytest.approx(1.0, abs=1e-9)


def test_blowup_is_reported():
    cfg = TrajectoryConfig(dt=0.5, t_total=1000, t_transient=0)
    with pytest.raises(IntegrationBlowupError):
        time_average(STANDARD, [M("z")], cfg)


def test_average_is_deterministic():
    cfg = TrajectoryConfig(t_total=50, t_transient=10)
    a = time_average(STANDARD, [M("z"), M("y2")], cfg)
    b = time_average(STANDARD, [M("z"), M("y2")], cfg)
    assert a.raw == b.raw
    assert a.horizon == pytest.approx(40.0)


def test_chaotic_mean_of_z(chaotic):
    assert chaotic.normalized[M("z")] == pytest.approx(0.87223, abs=5e-3)


def test_chaotic_mean_of_y4(chaotic):
    assert chaotic.normalized[M("y4")] == pytest.approx(3.62466, rel=3e-2)


def test_chaotic_proportional_families(chaotic):
    raw = chaotic.raw
    beta = 8 / 3
    pairs = [
        (raw[M("xy")], beta * raw[M("z")]),
        (raw[M("xyz")], beta * raw[M("z2")]),
        (raw[M("xyz2")], beta * raw[M("z3")]),
        (raw[M("x4")], raw[M("x3y")]),
    ]
    for lhs, rhs in pairs:
        assert abs(lhs - rhs) <= 5e-3 * abs(rhs)


def test_chaotic_chain_for_y2(chaotic):
    raw = chaotic.raw
    predicted = 8 / 3 * (28 * raw[M("z")] - raw[M("z2")])
    assert abs(raw[M("y2")] - predicted) <= 5e-3 * predicted


def test_chaotic_normalized_means_are_nonnegative(chaotic):
    assert len(chaotic.normalized) == 18
    assert all(v >= -1e-6 for v in chaotic.normalized.values())


def test_lie_derivatives_average_out():
    rng = random.Random(11)
    vs = VarSet(("x", "y", "z"))
    terms = {m: rng.randint(-3, 3) for m in monomials_up_to(vs, 4, min_degree=1)}
    V = Poly(vs, terms)
    L = lie_derivative(V, vector_field(STANDARD))
    scale = sum(abs(c) * 60.0 ** sum(m) for m, c in V.terms.items())
    for t_total in (600.0, 6000.0):
        cfg = TrajectoryConfig(t_total=t_total, t_transient=100)
        (avg,) = average_polys(STANDARD, [L], cfg)
        assert abs(avg) <= 2 * scale / (t_total - 100)


def test_average_report_record(chaotic):
    record = json.loads(json.dumps(chaotic.to_record()))
    assert record["record_type"] == "average"
    assert record["raw"]["z"] == chaotic.raw[M("z")]
    assert set(record["normalized"]) == {m.name for m in STANDARD_MOMENTS}


def test_symmetric_orbit_is_closed(orbit):
    assert orbit.symbols == "+-"
    assert orbit.residual <= 1e-10
    assert 1.5 < orbit.period < 1.6
    assert orbit.section_point[2] == 27.0
    assert orbit.section_point[0] > 0
    assert np.allclose(orbit.states[0], orbit.states[-1], atol=1e-6)


@mark.parametrize(
    "text,value",
    [("y2", 1.1621684), ("y2z", 1.0394975), ("xy3", 2.9987454), ("z4", 1.1155092)],
)
def test_symmetric_orbit_averages(orbit, text, value):
    report = orbit_average(orbit, [M(text)])
    assert report.normalized[M(text)] == pytest.approx(value, abs=1e-5)


def test_antisymmetric_average_vanishes_on_symmetric_orbit(orbit):
    report = orbit_average(orbit, [M("xz")])
    assert abs(report.raw[M("xz")]) < 1e-6
    assert M("xz") not in report.normalized


def test_orbit_export(orbit):
    frame = orbit.to_frame()
    assert list(frame.columns) == ["t", "x", "y", "z"]
    assert len(frame) == len(orbit.times)
    assert orbit.to_record()["symbols"] == "+-"


def test_three_symbol_orbit():
    found = find_periodic_orbit(STANDARD, "++-")
    assert found.residual <= 1e-10
    assert [q[0] > 0 for q in found.section_points] == [True, True, False]
    report = orbit_average(found, [M("x2"), M("xy"), M("z")])
    raw = report.raw
    assert raw[M("x2")] == pytest.approx(raw[M("xy")], rel=1e-6)
    assert raw[M("xy")] == pytest.approx(8 / 3 * raw[M("z")], rel=1e-6)


def test_unsupported_symbols():
    with pytest.raises(ValueError):
        find_periodic_orbit(STANDARD, "+--+")


def test_not_found_error_is_runtime_error():
    assert issubclass(OrbitNotFoundError, RuntimeError)
    assert isinstance(AverageReport({}, {}, 1.0), AverageReport)
