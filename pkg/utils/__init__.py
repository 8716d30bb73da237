# File: utils/__init__.py
# Package export surface for utilities
from .atomic_persistence import write_bytes_atomic
from .logger import get_logger
