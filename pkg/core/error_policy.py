"""
Error policies for sweep cells.

Loads per-exception policies from config/error_policies.yml and decides
whether a failing sweep cell is recorded (and the sweep continues) or
aborts the sweep.

Usage:
    from core.error_policy import ErrorPolicyManager

    policy = ErrorPolicyManager.get_instance().policy_for(exc)
    if policy.should_abort():
        raise exc
    cell.error = policy.describe(exc)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import threading
from typing import Any, ClassVar, Optional

import yaml

from config.settings import ERROR_POLICY_PATH
from utils.logger import get_logger


logger = get_logger(__name__)

_VALID_RECOVERY = ("record", "abort")
_VALID_SEVERITY = ("debug", "info", "warning", "error")


@dataclass(frozen=True)
class ErrorPolicy:
    """How the sweep engine responds to one exception type."""

    error_type: str
    category: str
    recovery: str
    severity: str
    message: str

    def should_abort(self) -> bool:
        return self.recovery == "abort"

    def describe(self, exc: BaseException) -> str:
        """Error string stored in a failed cell."""
        return f"{type(exc).__name__}: {self.message}: {exc}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "error_type": self.error_type,
            "category": self.category,
            "recovery": self.recovery,
            "severity": self.severity,
            "message": self.message,
        }


_DEFAULT_POLICY = ErrorPolicy(
    error_type="unknown_error", category="default", recovery="record", severity="error", message="unexpected failure"
)


class ErrorPolicyManager:
    """
    Singleton manager for sweep-cell error policies.

    Lookup walks the exception's MRO so a policy for a base class covers
    its subclasses.
    """

    _instance: ClassVar[Optional[ErrorPolicyManager]] = None
    _lock: ClassVar[threading.Lock] = threading.Lock()

    def __init__(self, policy_file: Optional[Path | str] = None):
        self.policies: dict[str, ErrorPolicy] = {}
        self.default_policy: ErrorPolicy = _DEFAULT_POLICY
        self._load_policies(Path(policy_file) if policy_file else ERROR_POLICY_PATH)

    @classmethod
    def get_instance(cls) -> ErrorPolicyManager:
        """Get the shared instance (thread-safe)."""
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = cls()
        return cls._instance

    def _load_policies(self, policy_path: Path) -> None:
        if not policy_path.exists():
            logger.warning("error_policy.file_missing", path=str(policy_path))
            return
        try:
            with policy_path.open(encoding="utf-8") as f:
                config = yaml.safe_load(f)
        except yaml.YAMLError as e:
            logger.error("error_policy.parse_failed", path=str(policy_path), error=str(e))
            return

        if not isinstance(config, dict):
            logger.error("error_policy.invalid_format", path=str(policy_path))
            return

        for category, error_types in config.items():
            if not isinstance(error_types, dict):
                continue
            for error_type, raw in error_types.items():
                policy = self._parse_policy(error_type, category, raw or {})
                if policy is None:
                    continue
                if category == "default":
                    self.default_policy = policy
                else:
                    self.policies[error_type] = policy

        logger.debug("error_policy.loaded", path=str(policy_path), count=len(self.policies))

    @staticmethod
    def _parse_policy(error_type: str, category: str, raw: dict[str, Any]) -> Optional[ErrorPolicy]:
        recovery = str(raw.get("recovery", "record"))
        severity = str(raw.get("severity", "error"))
        if recovery not in _VALID_RECOVERY or severity not in _VALID_SEVERITY:
            logger.error("error_policy.invalid_entry", error_type=error_type, recovery=recovery, severity=severity)
            return None
        return ErrorPolicy(
            error_type=error_type,
            category=category,
            recovery=recovery,
            severity=severity,
            message=str(raw.get("message", f"{category} error: {error_type}")),
        )

    def policy_for(self, exc: BaseException) -> ErrorPolicy:
        """Most specific policy for ``exc`` (default when none matches)."""
        for klass in type(exc).__mro__:
            policy = self.policies.get(klass.__name__)
            if policy is not None:
                return policy
        return self.default_policy

    def list_policies(self) -> dict[str, Any]:
        return {name: policy.to_dict() for name, policy in sorted(self.policies.items())}


def handle_cell_error(exc: BaseException, **context: Any) -> str:
    """Log ``exc`` per its policy; re-raise on abort, else return the cell error string."""
    policy = ErrorPolicyManager.get_instance().policy_for(exc)
    getattr(logger, policy.severity)("sweep.cell_failed", error_type=type(exc).__name__, detail=str(exc), **context)
    if policy.should_abort():
        raise exc
    return policy.describe(exc)
