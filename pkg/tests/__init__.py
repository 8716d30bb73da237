# File: tests/__init__.py
"""
Test suite for ridgelab.
Unit tests live in tests/unit, CLI and Monte-Carlo agreement tests in tests/integration.
"""
