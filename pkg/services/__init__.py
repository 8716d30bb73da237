"""
services/__init__.py

Package export surface for the experiment layer.
"""

from __future__ import annotations

from .classifier import FeatureDataset, classification_error, load_feature_dataset, train_classifier_ensemble
from .grid_io import emit, load_grid
from .schemas import ClassifyConfig, LearningCurveConfig, PhaseConfig, config_hash, load_config
from .simulator import exact_generalization_error, generate_dataset, run_trials, train_ensemble
from .sweep import SweepGrid, classify_sweep, learning_curve_sweep, phase_diagram_sweep
