"""
Atomic Persistence Utilities

Atomic file writes for emitted result grids.
All writes use the temp-file -> rename pattern, so a crashed or interrupted
sweep never leaves a half-written table behind.
"""
from __future__ import annotations

import os
from pathlib import Path

from utils.logger import get_logger


log = get_logger(__name__)


def write_bytes_atomic(payload: bytes, file_path: Path | str) -> Path:
    """
    Write raw bytes atomically.

    Args:
        payload: Bytes to write
        file_path: Target file path

    Returns:
        The resolved target path

    Raises:
        OSError: with the offending path in the message when the write fails
    """
    file_path = Path(file_path)
    temp_path = file_path.with_name(f".{file_path.name}.{os.getpid()}.tmp")
    try:
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with temp_path.open("wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        # POSIX guarantees rename atomicity within a filesystem
        temp_path.replace(file_path)
    except OSError as e:
        temp_path.unlink(missing_ok=True)
        log.error("persist.write_failed", path=str(file_path), error=str(e))
        raise OSError(f"cannot write {file_path}: {e}") from e

    log.debug("persist.saved", path=str(file_path), size=len(payload))
    return file_path
