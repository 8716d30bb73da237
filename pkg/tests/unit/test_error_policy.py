"""
tests/unit/test_error_policy.py

Sweep-cell error policies loaded from YAML.
"""
from pathlib import Path

import pytest

from core.error_policy import ErrorPolicyManager, handle_cell_error
from core.errors import (
    ConfigValidationError,
    CovarianceError,
    DatasetFormatError,
    NonConvergence,
    ParameterError,
    SingularResolvent,
)


def test_shipped_policies():
    manager = ErrorPolicyManager.get_instance()
    assert manager.policy_for(NonConvergence(0, 10, 1e-3)).recovery == "record"
    assert manager.policy_for(SingularResolvent(1)).severity == "warning"
    assert manager.policy_for(ConfigValidationError([("$", "x")])).should_abort()
    assert manager.policy_for(DatasetFormatError("x")).should_abort()
    assert manager.policy_for(KeyError("x")).error_type == "unknown_error"


def test_singleton():
    assert ErrorPolicyManager.get_instance() is ErrorPolicyManager.get_instance()


def test_handle_records_and_describes():
    exc = ParameterError("alpha must be positive, got 0")
    text = handle_cell_error(exc, sweep="curve", cell=3)
    assert text == "ParameterError: parameter out of range: alpha must be positive, got 0"


def test_handle_reraises_on_abort():
    with pytest.raises(DatasetFormatError):
        handle_cell_error(DatasetFormatError("truncated header"), sweep="classify", cell=0)


def test_custom_policy_file(tmp_path: Path):
    path = tmp_path / "policies.yml"
    path.write_text(
        """
numerical:
  CovarianceError:
    recovery: "abort"
    severity: "error"
    message: "bad covariance"
  NonConvergence:
    recovery: "retry"
configuration:
  RidgeLabError:
    recovery: "record"
    severity: "info"
default:
  unknown_error:
    recovery: "abort"
    severity: "error"
    message: "stop"
""",
        encoding="utf-8",
    )
    manager = ErrorPolicyManager(path)
    assert manager.policy_for(CovarianceError("x")).should_abort()
    # invalid recovery value is skipped, so the base-class policy applies
    assert manager.policy_for(NonConvergence(0, 1, 1.0)).error_type == "RidgeLabError"
    assert manager.policy_for(ZeroDivisionError()).message == "stop"
    assert set(manager.list_policies()) == {"CovarianceError", "RidgeLabError"}


def test_missing_or_broken_file_falls_back(tmp_path: Path):
    missing = ErrorPolicyManager(tmp_path / "absent.yml")
    assert missing.policies == {}
    broken = tmp_path / "broken.yml"
    broken.write_text("numerical: [unclosed", encoding="utf-8")
    assert ErrorPolicyManager(broken).policy_for(ParameterError("x")).recovery == "record"
