import json
import sys
from fractions import Fraction
from pathlib import Path

import pytest

import check_certificate
import main
from run_bounds import RunConfig, cmd_certify

REPO_ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture
def in_repo(monkeypatch, tmp_path):
    monkeypatch.chdir(REPO_ROOT)
    monkeypatch.setenv("LORENZ_BOUNDS_RESULTS_DIR", str(tmp_path / "results"))
    return tmp_path


def run_cli(monkeypatch, *argv):
    monkeypatch.setattr(sys, "argv", ["main.py", *argv])
    main.main()


def test_parser_knows_every_command():
    parser = main.build_parser()
    args = parser.parse_args(["bound", "--moment", "x2z", "--degree", "4", "--sense", "lower"])
    assert (args.command, args.moment, args.degree, args.sense) == ("bound", "x2z", 4, "lower")
    args = parser.parse_args(["certify", "z3", "--gamma", "0", "3/8", "--at-r", "28"])
    assert args.gamma == ["0", "3/8"]
    for command in ("average", "orbit", "relations", "region", "report"):
        assert parser.parse_args([command]).command == command
    with pytest.raises(SystemExit):
        parser.parse_args(["certify", "z4"])


def test_system_overrides_reach_the_run_config(in_repo):
    args = main.build_parser().parse_args(["region", "--beta", "1/2", "--r", "symbolic"])
    cfg = main.run_config(args)
    assert cfg.system.beta == Fraction(1, 2)
    assert cfg.system.symbolic


def test_dry_run_only_checks_setup(in_repo, monkeypatch, capsys):
    run_cli(monkeypatch, "certify", "z2", "--dry-run")
    out = capsys.readouterr().out
    assert "Preflight checks passed" in out
    assert not (in_repo / "results").exists()


def test_certify_writes_report_and_certificate(in_repo, monkeypatch, capsys):
    report = in_repo / "z2_report.json"
    cert = in_repo / "z2.json"
    run_cli(monkeypatch, "certify", "z2", "--output", str(report), "--certificate-out", str(cert))
    assert "certificate z2 verified" in capsys.readouterr().out
    assert json.loads(report.read_text())["ok"] is True
    assert json.loads(cert.read_text())["record_type"] == "certificate"


def test_default_output_goes_to_results_dir(in_repo, monkeypatch):
    run_cli(monkeypatch, "relations")
    written = list((in_repo / "results").glob("relations_*.json"))
    assert len(written) == 1


def test_rejected_certificate_exits_nonzero(in_repo, monkeypatch):
    path = in_repo / "bad.json"
    cmd_certify(RunConfig(), "z2", output=path)
    data = json.loads(path.read_text())
    data["V"] = "0"
    path.write_text(json.dumps(data))
    with pytest.raises(SystemExit) as info:
        run_cli(monkeypatch, "verify", str(path), "--output", str(in_repo / "out.json"))
    assert info.value.code == 1


def test_stage_failure_exits_nonzero(in_repo, monkeypatch, capsys):
    with pytest.raises(SystemExit) as info:
        run_cli(monkeypatch, "verify", str(in_repo / "missing.json"))
    assert info.value.code == 1
    assert "stage 'load' failed" in capsys.readouterr().err


def test_standalone_checker(tmp_path, capsys):
    good = tmp_path / "xy3.json"
    cmd_certify(RunConfig(), "xy3", output=good)
    check_certificate.main([str(good)])
    out = capsys.readouterr().out
    assert "xy3" in out
    assert "1/1 certificate(s) verified." in out

    with pytest.raises(SystemExit):
        check_certificate.main([str(good), str(tmp_path / "missing.json")])
    assert "1/2 certificate(s) verified." in capsys.readouterr().out
