# src/utils.py

"""
utils.py

Shared utilities

Responsibilities:
- Load and cache YAML configuration (config/lorenz.yaml, config/report.yaml),
  merging a user config file over the defaults and rejecting unknown keys.
- Write reports as deterministic JSON: sorted keys, two-space indent,
  Fractions as "p/q" strings, numpy values as plain numbers.
- Read JSON reports back.
- Resolve the results directory (LORENZ_BOUNDS_RESULTS_DIR).
- Does NOT solve, certify or integrate anything.
"""

from __future__ import annotations

import json
import os
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np
import yaml


DEFAULT_CONFIG_PATH = Path("config/lorenz.yaml")
DEFAULT_REPORT_CONFIG_PATH = Path("config/report.yaml")
CONFIG_KEYS = ("system", "solver", "certify", "trajectory", "orbit", "rescale")


# -----------------------------
# Step 1: Configuration
# -----------------------------

@lru_cache(maxsize=8)
def _load_yaml_cached(path: str) -> str:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Config file not found at {p}. Create it or pass --config.")
    with p.open("r", encoding="utf-8") as f:
        return json.dumps(yaml.safe_load(f) or {})


def load_yaml(path: str | Path) -> Dict[str, Any]:
    """Parsed YAML mapping. Cached per path; each call gets its own copy."""
    data = json.loads(_load_yaml_cached(str(path)))
    if not isinstance(data, dict):
        raise ValueError(f"Config file {path} must contain a mapping at the top level.")
    return data


def load_config(path: Optional[str | Path] = None, defaults: str | Path = DEFAULT_CONFIG_PATH) -> Dict[str, Any]:
    """
    config/lorenz.yaml with an optional user file merged over it, block by
    block. Unknown top-level keys are rejected.
    """
    merged = load_yaml(defaults) if Path(defaults).exists() else {}
    if path is not None:
        for key, value in load_yaml(path).items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
    unknown = sorted(set(merged) - set(CONFIG_KEYS))
    if unknown:
        raise ValueError(f"Unknown config keys {unknown}. Expected one of: {list(CONFIG_KEYS)}")
    return merged


def results_dir() -> Path:
    return Path(os.environ.get("LORENZ_BOUNDS_RESULTS_DIR", "data/results"))


# -----------------------------
# Step 2: Reports
# -----------------------------

def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps_report(record: Mapping[str, Any]) -> str:
    # json writes floats with repr: shortest string that reads back exactly
    return json.dumps(to_jsonable(record), sort_keys=True, indent=2) + "\n"


def write_report(path: str | Path, record: Mapping[str, Any]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as f:
        f.write(dumps_report(record))
    return p


def read_json(path: str | Path) -> Dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Report file not found at {p}.")
    with p.open("r", encoding="utf-8") as f:
        return json.load(f)
