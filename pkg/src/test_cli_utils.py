from pathlib import Path

import cli_utils
from cli_utils import default_output_path, fail, format_table, ok, progress_line, validate_setup, warn

CONFIG = Path(__file__).resolve().parent.parent / "config" / "lorenz.yaml"


def test_status_prefixes_without_color(monkeypatch):
    monkeypatch.setattr(cli_utils, "ANSI_ENABLED", False)
    assert ok("done") == "[OK] done"
    assert warn("careful") == "[!]  careful"
    assert fail("broken") == "[X]  broken"


def test_color_wraps_known_names_only(monkeypatch):
    monkeypatch.setattr(cli_utils, "ANSI_ENABLED", True)
    assert cli_utils.color("x", "green") == "\033[32mx\033[0m"
    assert cli_utils.color("x", "purple") == "x"


def test_status_prefixes_with_color(monkeypatch):
    monkeypatch.setattr(cli_utils, "ANSI_ENABLED", True)
    assert ok("done") == "\033[32m[OK] done\033[0m"
    assert fail("broken") == "\033[31m[X]  broken\033[0m"
    assert cli_utils.color("x", "bold") == "\033[1mx\033[0m"


def test_validate_setup_accepts_shipped_config():
    assert validate_setup(CONFIG) == []


def test_validate_setup_reports_problems(tmp_path):
    problems = validate_setup(tmp_path / "missing.yaml", certificates_dir=tmp_path / "nowhere")
    assert any("Config file not found" in p for p in problems)
    assert any("Certificates directory not found" in p for p in problems)

    bad = tmp_path / "bad.yaml"
    bad.write_text("system:\n  sigma: 0\n", encoding="utf-8")
    empty = tmp_path / "certs"
    empty.mkdir()
    problems = validate_setup(bad, certificates_dir=empty)
    assert any("Invalid config" in p for p in problems)
    assert any("No certificate files" in p for p in problems)


def test_default_output_path(tmp_path):
    path = default_output_path(tmp_path, "bound")
    assert path.parent == tmp_path
    assert path.name.startswith("bound_")
    assert path.suffix == ".json"
    assert default_output_path(tmp_path, "region", ".csv").suffix == ".csv"


def test_format_table(monkeypatch):
    monkeypatch.setattr(cli_utils, "ANSI_ENABLED", False)
    text = format_table(
        [{"moments": "z", "bound": 1.0000012345}, {"moments": "x2, xy", "bound": None}],
        ("moments", "bound"),
        title="T",
    )
    lines = text.splitlines()
    assert lines[0] == "T"
    assert lines[1].split() == ["moments", "bound"]
    assert lines[2].split() == ["z", "1.000001"]
    assert lines[3].endswith("n/a")
    assert format_table([], ("a",)) == "(no results)"


def test_progress_line(monkeypatch):
    monkeypatch.setattr(cli_utils, "ANSI_ENABLED", False)
    line = progress_line(5, 10, "x2z", "ok")
    assert line.startswith("[" + "#" * 10 + "-" * 10 + "]")
    assert "5/10 x2z status=ok" in line
    assert progress_line(0, 0, "none", "unavailable").startswith("[" + "-" * 20 + "]")
