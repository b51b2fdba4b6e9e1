import json
from fractions import Fraction

import pytest
from pytest import mark

from lorenz import STANDARD_MOMENTS, LorenzParams, RegionViolation, moment_at_nonzero_eq, parse_moment
from run_bounds import (
    RunConfig,
    StageError,
    beta_grid,
    cmd_average,
    cmd_bound,
    cmd_certify,
    cmd_orbit,
    cmd_region,
    cmd_relations,
    cmd_verify,
    stage,
)
from utils import dumps_report, write_report

F = Fraction
CFG = RunConfig()


def test_stage_wraps_errors_with_its_name():
    with pytest.raises(StageError) as info:
        with stage("solve"):
            raise ValueError("boom")
    assert info.value.stage == "solve"
    assert isinstance(info.value.cause, ValueError)
    assert str(info.value) == "stage 'solve' failed: boom"


def test_stage_does_not_rewrap():
    with pytest.raises(StageError) as info:
        with stage("outer"):
            with stage("inner"):
                raise KeyError("x")
    assert info.value.stage == "inner"


def test_run_config_from_config():
    cfg = RunConfig.from_config(
        {
            "system": {"beta": "8/3", "sigma": 10, "r": 28},
            "certify": {"denominator_limit": 1000, "padding_schedule": [0, "1e-6"]},
            "orbit": {"max_restarts": 3},
            "rescale": "1/2",
        }
    )
    assert cfg.system.r == 28
    assert cfg.denominator_limit == 1000
    assert cfg.padding_schedule == ("0", "1e-6")
    assert cfg.orbit.max_restarts == 3
    assert cfg.rescale == F(1, 2)
    echo = cfg.echo()
    assert echo["system"]["beta"] == "8/3"
    assert echo["rescale"] == F(1, 2)


@mark.parametrize(
    "cfg",
    [
        {"certify": {"limit": 10}},
        {"orbit": {"tolerance": 1e-9}},
        {"rescale": 0},
        {"certify": {"denominator_limit": 0}},
    ],
)
def test_run_config_rejects_bad_settings(cfg):
    with pytest.raises(ValueError):
        RunConfig.from_config(cfg)


@pytest.fixture(scope="module")
def z_bound():
    return cmd_bound(CFG, parse_moment("z"), 2, rescale=F(1))


def test_bound_on_mean_z_is_certified(z_bound):
    assert z_bound["record_type"] == "bound"
    assert z_bound["solver_status"] in ("optimal", "marginal")
    assert z_bound["verified"]
    assert z_bound["verified_bound"] >= 27
    assert 1 <= z_bound["normalized_bound"] <= 1 + 2e-5
    assert z_bound["numeric_optimum"] == pytest.approx(27, rel=1e-5)
    assert z_bound["enclosure"]["status"] == "verified"


def test_bound_report_is_deterministic_json(z_bound):
    text = dumps_report(z_bound)
    assert text == dumps_report(json.loads(text))
    assert isinstance(json.loads(text)["verified_bound"], str)


def test_rescaled_bound_maps_back_to_original_units():
    report = cmd_bound(CFG, parse_moment("z"), 2)
    assert report["rescale"] == 20
    assert report["numeric_optimum"] == pytest.approx(27, rel=1e-4)
    if report["verified"]:
        assert report["verified_bound"] >= 27
        assert report["normalized_bound"] == pytest.approx(1, abs=1e-4)


def test_bound_without_auxiliary_function_is_not_verified(tmp_path):
    report = cmd_bound(CFG, parse_moment("z"), 0, export_problem=tmp_path / "problem.json")
    assert report["solver_status"] == "infeasible"
    assert not report["verified"]
    assert report["verified_bound"] is None
    assert report["normalized_bound"] is None
    assert (tmp_path / "problem.json").exists()


HIGHER_DEGREE_BOUNDS = [
    ("y2", 4, 1.2585),
    ("y2", 6, 1.1694),
    ("y2z", 4, 1.0480),
    ("y2z", 6, 1.0404),
    ("z4", 4, 1.1966),
    ("z4", 6, 1.1199),
    ("x2z2", 4, 1.2822),
    ("x2z2", 6, 1.2053),
]


@pytest.fixture(scope="module")
def higher_degree_reports():
    return {(m, d): cmd_bound(CFG, parse_moment(m), d) for m, d, _ in HIGHER_DEGREE_BOUNDS}


@mark.parametrize("moment,degree,expected", HIGHER_DEGREE_BOUNDS)
def test_higher_degree_bounds_are_verified(higher_degree_reports, moment, degree, expected):
    report = higher_degree_reports[(moment, degree)]
    assert report["solver_status"] in ("optimal", "marginal")
    assert report["normalized_optimum"] == pytest.approx(expected, rel=1e-2)
    assert report["verified"], report["enclosure"]
    assert report["normalized_bound"] >= report["normalized_optimum"] * (1 - 1e-9)
    assert report["normalized_bound"] <= report["normalized_optimum"] * (1 + 5e-3)


def test_degree_four_bound_on_mean_y2_is_sharp_to_three_digits(higher_degree_reports):
    report = higher_degree_reports[("y2", 4)]
    assert report["normalized_optimum"] == pytest.approx(1.2585, abs=1e-3)


def test_raising_the_degree_tightens_the_bound(higher_degree_reports):
    for moment in ("y2", "y2z", "z4", "x2z2"):
        deg4 = higher_degree_reports[(moment, 4)]["normalized_bound"]
        deg6 = higher_degree_reports[(moment, 6)]["normalized_bound"]
        assert deg6 < deg4


def test_padded_degree_four_certificate_verifies_from_file(tmp_path):
    out = tmp_path / "y2_deg4.json"
    report = cmd_bound(CFG, parse_moment("y2"), 4, certificate_out=out)
    assert report["verified"]
    again = cmd_verify(out)
    assert again["ok"]
    assert again["original_bound"] == report["verified_bound"]


def test_certificate_written_by_bound_verifies(tmp_path, z_bound):
    out = tmp_path / "z.json"
    cmd_bound(CFG, parse_moment("z"), 2, rescale=F(1), certificate_out=out)
    report = cmd_verify(out)
    assert report["ok"]
    assert report["sense"] == "upper"


@mark.parametrize("name", ["z2", "z3", "xy3"])
def test_certify_and_verify_round_trip(tmp_path, name):
    out = tmp_path / f"{name}.json"
    report = cmd_certify(CFG, name, output=out)
    assert report["ok"], report["reason"]
    assert report["identity_holds"]
    assert report["squares"]
    again = cmd_verify(out)
    assert again["record_type"] == "verify"
    assert again["ok"]
    assert again["bound"] == report["bound"]


def test_certify_specialised_at_r():
    report = cmd_certify(CFG, "z3", r=F(28))
    assert report["ok"]
    assert report["bound"] == str(27**4)


def test_certify_outside_region_fails_the_build_stage():
    with pytest.raises(StageError) as info:
        cmd_certify(CFG, "z3", gamma=(5, 5))
    assert info.value.stage == "build"
    assert isinstance(info.value.cause, RegionViolation)


def test_tampered_certificate_is_rejected(tmp_path):
    out = tmp_path / "z2.json"
    cmd_certify(CFG, "z2", output=out)
    data = json.loads(out.read_text())
    data["gram"]["s"][0][0] = str(F(data["gram"]["s"][0][0]) + 1)
    out.write_text(json.dumps(data))
    report = cmd_verify(out)
    assert not report["ok"]
    assert report["reason"]


def test_verify_missing_file():
    with pytest.raises(StageError) as info:
        cmd_verify("does/not/exist.json")
    assert info.value.stage == "load"


def test_relations_without_averages():
    record = cmd_relations(CFG)
    assert record["record_type"] == "relations"
    assert len(record["relations"]) == 12
    assert "y2" in record["chain"]
    assert "residuals" not in record


def test_relation_residuals_from_an_average_report(tmp_path):
    raw = {m.name: float(moment_at_nonzero_eq(m, CFG.system)) for m in STANDARD_MOMENTS}
    path = write_report(tmp_path / "avg.json", {"record_type": "average", "source": "equilibrium", "raw": raw})
    record = cmd_relations(CFG, path)
    assert record["averages_source"] == "equilibrium"
    assert len(record["residuals"]) == 12
    assert all(abs(v) < 1e-6 for v in record["residuals"].values())


def test_relations_reject_reports_without_averages(tmp_path):
    path = write_report(tmp_path / "empty.json", {"record_type": "bound"})
    with pytest.raises(StageError):
        cmd_relations(CFG, path)


def test_symbolic_relations():
    cfg = RunConfig(system=LorenzParams(r=None))
    record = cmd_relations(cfg, param="rho")
    assert len(record["relations"]) == 12


def test_beta_grid():
    assert beta_grid(F(1), F(3), 3) == [1, 2, 3]
    assert beta_grid(F(1, 2), F(9), 1) == [F(1, 2)]
    with pytest.raises(ValueError):
        beta_grid(1, 2, 0)


def test_region_rows(tmp_path):
    csv = tmp_path / "region.csv"
    record = cmd_region(CFG, [F(8, 3), F(12)], csv_out=csv)
    standard, wide = record["rows"]
    assert standard["z2"] and standard["xy3"]
    assert standard["z3"] == "feasible"
    assert standard["gamma1"] is not None
    assert wide["z2"]
    assert not wide["xy3"]
    assert wide["z3"] == "infeasible"
    lines = csv.read_text().splitlines()
    assert lines[0].startswith("beta,sigma")
    assert lines[1].startswith("8/3,10")


def test_region_limits():
    record = cmd_region(CFG, [F(8, 3)], limits=True)
    assert record["z3_beta_upper"] == F(121, 12)
    assert 0.04 < record["z3_beta_lower"] < 0.05
    low, high = record["gamma2_interval"]
    assert low - 1e-6 <= 3 / 8 <= high + 1e-6


def test_average_report_echoes_the_horizon_used():
    record = cmd_average(CFG, [parse_moment("z"), parse_moment("y2")], t_total=300.0)
    assert record["record_type"] == "average"
    assert record["config"]["trajectory"]["t_total"] == 300.0
    assert set(record["raw"]) == {"z", "y2"}
    assert 0.5 < record["normalized"]["z"] < 1.0


def test_orbit_report_and_csv(tmp_path):
    csv = tmp_path / "orbit.csv"
    record = cmd_orbit(CFG, "+-", [parse_moment("y2")], states_csv=csv)
    assert record["record_type"] == "orbit"
    assert 1.5 < record["period"] < 1.6
    assert record["averages"]["normalized"]["y2"] == pytest.approx(1.1621684, abs=1e-5)
    assert csv.read_text().splitlines()[0] == "t,x,y,z"
