"""
cli_utils.py

Shared helpers for the CLI experience
"""

from __future__ import annotations

import importlib.util
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Mapping, Optional, Sequence


ANSI_ENABLED = os.environ.get("NO_COLOR") is None and sys.stdout.isatty()

# SGR parameters for the styles the CLI uses.
_SGR = {"bold": 1, "dim": 2, "red": 31, "green": 32, "yellow": 33, "cyan": 36}


def color(text: str, name: str) -> str:
    code = _SGR.get(name)
    if code is None or not ANSI_ENABLED:
        return text
    return f"\033[{code}m{text}\033[0m"


def _tagged(tag: str, style: str):
    def render(text: str) -> str:
        return color(f"{tag.ljust(4)} {text}", style)

    return render


ok = _tagged("[OK]", "green")
warn = _tagged("[!]", "yellow")
fail = _tagged("[X]", "red")


REQUIRED_PACKAGES = ("numpy", "scipy", "sympy", "numba", "pandas", "yaml")


def validate_setup(config_path: Path, certificates_dir: Optional[Path] = None) -> list[str]:
    """
    Returns a list of human-readable problems. Empty list means all checks passed.
    """
    problems: list[str] = []

    for name in REQUIRED_PACKAGES:
        if importlib.util.find_spec(name) is None:
            problems.append(f"Missing Python package '{name}'. Install it with: pip install -r requirements.txt")

    if not config_path.exists():
        problems.append(f"Config file not found: {config_path}")
    else:
        from lorenz import LorenzParams
        from utils import load_config

        try:
            cfg = load_config(config_path)
            LorenzParams.from_config(cfg.get("system"))
            if float(cfg.get("rescale", 1)) <= 0:
                problems.append(f"rescale must be > 0 in {config_path}")
        except (ValueError, TypeError, ZeroDivisionError) as e:
            problems.append(f"Invalid config {config_path}: {e}")

    if certificates_dir is not None:
        if not certificates_dir.exists():
            problems.append(f"Certificates directory not found: {certificates_dir}")
        elif not any(certificates_dir.glob("*.json")):
            problems.append(f"No certificate files in {certificates_dir}")

    return problems


def default_output_path(base_dir: Path, label: str, suffix: str = ".json") -> Path:
    timestamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    return base_dir / f"{label}_{timestamp}{suffix}"


def _cell(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.7g}"
    return str(value)


def format_table(rows: Sequence[Mapping], columns: Sequence[str], title: Optional[str] = None) -> str:
    """Plain aligned table; missing cells print as n/a."""
    if not rows:
        return color("(no results)", "dim")

    cells = [[_cell(row.get(c)) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[k]) for r in cells)) for k, c in enumerate(columns)]

    lines: list[str] = []
    if title:
        lines.append(color(title, "bold"))
    lines.append(color("  ".join(c.ljust(w) for c, w in zip(columns, widths)), "cyan"))
    for r in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return "\n".join(lines)


def progress_line(current: int, total: int, label: str, status: str) -> str:
    bar_width = 20
    filled = 0 if total == 0 else int(bar_width * current / total)
    bar = "#" * filled + "-" * (bar_width - filled)
    shade = "green" if status in ("verified", "optimal", "ok") else "yellow"
    return f"[{bar}] {current:>3}/{total} {label} status={color(status, shade)}"
