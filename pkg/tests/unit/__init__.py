"""Unit tests for core numerics and the experiment layer."""
