from __future__ import annotations

# File: core/__init__.py
# Package export surface for core
# Re-export the numerics most callers need
from .covariance import (
    CovarianceSpec,
    GroundTruth,
    PlanStrategy,
    SpikedTruthPrior,
    SubsamplingPlan,
    sample_ground_truth,
    sample_subsampling_plan,
)
from .errors import (
    ConfigValidationError,
    CovarianceError,
    DatasetFormatError,
    NonConvergence,
    ParameterError,
    PlanError,
    RidgeLabError,
    SingularResolvent,
)
from .theory_equicorr import EquiTask, ReducedPoint, RegMode, ensemble_error_equicorr, optimal_k, reduced_error
from .theory_general import ErrorMatrix, OrderParameters, general_error_matrix, solve_saddle_point
