# -------------------- config/settings.py (start)
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Optional


# --- Paths ---
APP_ROOT: Path = Path(__file__).resolve().parents[1]
CONFIGS_DIR: Path = APP_ROOT / "configs"
ERROR_POLICY_PATH: Path = APP_ROOT / "config" / "error_policies.yml"


# -------------------- helpers --------------------
def _env_str(name: str, default: Optional[str] = None) -> Optional[str]:
    val = os.getenv(name)
    return val if val not in ("", None) else default


def _env_int(name: str, default: Optional[int] = None) -> Optional[int]:
    val = os.getenv(name)
    if val in (None, ""):
        return default
    try:
        return int(val)
    except Exception:
        return default


def _env_float(name: str, default: Optional[float] = None) -> Optional[float]:
    val = os.getenv(name)
    if val in (None, ""):
        return default
    try:
        return float(val)
    except Exception:
        return default


def _env_bool(name: str, default: bool = False) -> bool:
    return str(os.getenv(name, "1" if default else "0")).strip().lower() in ("1", "true", "yes", "on")


# -------------------- JSON override loader (start)
ENABLE_CONFIG_JSON: bool = _env_bool("RIDGELAB_ENABLE_CONFIG_JSON", True)
CONFIG_JSON_PATH: Path = Path(_env_str("RIDGELAB_CONFIG_JSON", str(APP_ROOT / "config" / "config.json")) or "")


def _load_config_json() -> dict[str, Any]:
    """Load the app-local override JSON if present; return {} on any issue."""
    if not ENABLE_CONFIG_JSON:
        return {}
    try:
        with CONFIG_JSON_PATH.open("r", encoding="utf-8") as f:
            data = json.load(f)
        return data if isinstance(data, dict) else {}
    except FileNotFoundError:
        return {}
    except Exception:
        return {}


# -------------------- JSON override loader (end)

# --- Feature flags ---
DEBUG_MODE: bool = _env_bool("DEBUG_MODE", False)
LOG_FILE: Optional[str] = _env_str("RIDGELAB_LOG_FILE", None)
ARTIFACT_VERSION: str = "0.3.0"

# -------------------- Execution --------------------
DEFAULT_THREADS: int = _env_int("RIDGELAB_THREADS", 1) or 1
DEFAULT_SEED: int = _env_int("RIDGELAB_SEED", 0) or 0

# -------------------- Saddle-point solver --------------------
SADDLE_MAX_ITER: int = _env_int("SADDLE_MAX_ITER", 10_000) or 10_000
SADDLE_DAMPING: float = _env_float("SADDLE_DAMPING", 0.5) or 0.5
SADDLE_REL_TOL: float = _env_float("SADDLE_REL_TOL", 1e-12) or 1e-12
SADDLE_RESIDUAL_TOL: float = _env_float("SADDLE_RESIDUAL_TOL", 1e-10) or 1e-10
# Falls back to a bracketed root solve when the damped iteration stalls.
SADDLE_BRACKET_FALLBACK: bool = _env_bool("SADDLE_BRACKET_FALLBACK", True)

# Apply JSON overrides (JSON wins over env if key exists)
_config = _load_config_json()
if isinstance(_config, dict):
    if isinstance(_config.get("DEBUG_MODE"), bool):
        DEBUG_MODE = _config["DEBUG_MODE"]
    if isinstance(_config.get("RIDGELAB_THREADS"), int) and _config["RIDGELAB_THREADS"] > 0:
        DEFAULT_THREADS = _config["RIDGELAB_THREADS"]
    if isinstance(_config.get("SADDLE_MAX_ITER"), int) and _config["SADDLE_MAX_ITER"] > 0:
        SADDLE_MAX_ITER = _config["SADDLE_MAX_ITER"]
    if isinstance(_config.get("SADDLE_DAMPING"), (int, float)) and 0.0 < _config["SADDLE_DAMPING"] <= 1.0:
        SADDLE_DAMPING = float(_config["SADDLE_DAMPING"])


__all__ = [
    "APP_ROOT",
    "ARTIFACT_VERSION",
    "CONFIGS_DIR",
    "DEBUG_MODE",
    "DEFAULT_SEED",
    "DEFAULT_THREADS",
    "ERROR_POLICY_PATH",
    "LOG_FILE",
    "SADDLE_BRACKET_FALLBACK",
    "SADDLE_DAMPING",
    "SADDLE_MAX_ITER",
    "SADDLE_REL_TOL",
    "SADDLE_RESIDUAL_TOL",
]
# -------------------- config/settings.py (end)
