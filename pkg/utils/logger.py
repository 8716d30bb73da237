# -------------------- logger (start)
"""
utils/logger.py
Unified logger for ridgelab: stdlib handlers (stderr + optional rotating
file) with structlog layered on top, respecting DEBUG_MODE from
config/settings.py. get_logger() is the single accessor for all modules.
"""

from __future__ import annotations

import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
import sys

import structlog

from config.settings import DEBUG_MODE, LOG_FILE


def _init_logger_system() -> None:
    """Initializes global logging handlers and the structlog pipeline once."""
    if getattr(_init_logger_system, "_initialized", False):
        return

    log_level = logging.DEBUG if DEBUG_MODE else logging.INFO

    fmt = "[%(asctime)s] [%(levelname)s] [%(name)s] %(message)s"
    datefmt = "%Y-%m-%d %H:%M:%S"
    formatter = logging.Formatter(fmt, datefmt)

    root_logger = logging.getLogger("ridgelab")
    root_logger.setLevel(log_level)
    for h in list(root_logger.handlers):
        try:
            h.close()
        except Exception:
            pass
    root_logger.handlers.clear()

    # stdout carries CLI results, so diagnostics go to stderr
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    console_handler.setLevel(log_level if DEBUG_MODE else logging.WARNING)
    root_logger.addHandler(console_handler)

    if LOG_FILE:
        log_path = Path(LOG_FILE)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(log_path, maxBytes=1_000_000, backupCount=3, encoding="utf-8")
        file_handler.setFormatter(formatter)
        file_handler.setLevel(log_level)
        root_logger.addHandler(file_handler)

    root_logger.propagate = False

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.format_exc_info,
            structlog.processors.KeyValueRenderer(key_order=["event"], sort_keys=True),
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    _init_logger_system._initialized = True


def get_logger(name: str = "ridgelab") -> structlog.stdlib.BoundLogger:
    """
    Returns a module-scoped structured logger.
    Example:
        log = get_logger(__name__)
        log.info("sweep.started", cells=12)
    """
    _init_logger_system()
    if not name.startswith("ridgelab"):
        name = f"ridgelab.{name}"
    return structlog.get_logger(name)


def setup_debug_logging(enabled: bool = False) -> None:
    """Raise or lower the package log level at runtime (CLI --verbose)."""
    _init_logger_system()
    root = logging.getLogger("ridgelab")
    new_level = logging.DEBUG if enabled else logging.INFO
    root.setLevel(new_level)
    for h in root.handlers:
        h.setLevel(new_level)


# -------------------- logger (end)
