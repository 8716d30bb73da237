"""
ridgelab Test Configuration

Pytest fixtures shared by the unit and integration suites: small covariances,
subsampling plans and experiment documents written to tmp_path.
"""
from __future__ import annotations

from pathlib import Path
import sys
from typing import Any, Callable

import orjson
import pytest


# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from core.covariance import CovarianceSpec, PlanStrategy, sample_subsampling_plan, toeplitz_covariance  # noqa: E402
from core.error_policy import ErrorPolicyManager  # noqa: E402


# ============================================================================
# SECTION 1: NUMERICS
# ============================================================================


@pytest.fixture
def isotropic_cov() -> CovarianceSpec:
    """s=1, c=0 with light feature noise over 60 features."""
    return CovarianceSpec.equicorrelated(1.0, 0.0, 0.1, 60)


@pytest.fixture
def correlated_cov() -> CovarianceSpec:
    return CovarianceSpec.equicorrelated(1.0, 0.5, 0.1, 60)


@pytest.fixture
def toeplitz_cov() -> CovarianceSpec:
    """Dense AR(1) signal with a weak AR(1) feature noise over 40 features."""
    return CovarianceSpec.explicit(toeplitz_covariance(0.6, 40), toeplitz_covariance(0.3, 40, 0.05))


@pytest.fixture
def three_way_plan():
    """Disjoint 20/20/20 split of 60 features."""
    return sample_subsampling_plan(PlanStrategy.HOMOGENEOUS, 3, 60, seed=11)


# ============================================================================
# SECTION 2: EXPERIMENT DOCUMENTS
# ============================================================================


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[[dict[str, Any], str], Path]:
    """Write an experiment document as JSON and return its path."""

    def _write(document: dict[str, Any], name: str = "experiment.json") -> Path:
        path = tmp_path / name
        path.write_bytes(orjson.dumps(document))
        return path

    return _write


@pytest.fixture
def small_curve_doc() -> dict[str, Any]:
    return {
        "kind": "curve",
        "seed": 5,
        "theory": "equicorr",
        "covariance": {"kind": "equicorrelated", "M": 60, "s": 1.0, "c": 0.5, "omega2": 0.1},
        "ensemble": {"strategy": "homogeneous", "k": 3},
        "truth": {"rho": 0.3},
        "zeta": 0.1,
        "eta": 0.1,
        "lam": 0.05,
        "alpha": {"values": [0.5, 1.5, 3.0]},
    }


@pytest.fixture
def small_phase_doc() -> dict[str, Any]:
    return {
        "kind": "phase",
        "reg_mode": "ridgeless",
        "x": {"name": "alpha", "values": [0.5, 1.0, 4.0]},
        "y": {"name": "H", "values": [0.0, 0.5]},
        "rho": 0.5,
        "k_max": 20,
        "append_alpha_infinity": True,
    }


@pytest.fixture
def small_classify_doc() -> dict[str, Any]:
    return {
        "kind": "classify",
        "seed": 2,
        "synthetic": {"M": 32, "C": 3, "n_train": 90, "n_test": 60},
        "ensemble": {"strategy": "homogeneous", "k": 2},
        "lam": 0.1,
        "train_sizes": [20, 60],
        "n_trials": 2,
    }


# ============================================================================
# SECTION 3: ISOLATION
# ============================================================================


@pytest.fixture(autouse=True)
def _fresh_error_policies():
    """Each test sees policies loaded from config/error_policies.yml."""
    ErrorPolicyManager._instance = None
    yield
    ErrorPolicyManager._instance = None
