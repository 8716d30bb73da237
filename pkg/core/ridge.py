"""
core/ridge.py

Ridge / minimum-norm least squares used by the simulator and the classifier.

    w = argmin ||X w - t||^2 + lam ||w||^2

lam > 0 solves the smaller of the primal (N x N) and dual (P x P) systems
with a Cholesky factorization; lam == 0 returns the minimum-norm
pseudoinverse solution.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from core.errors import ParameterError


def solve_ridge(X: np.ndarray, targets: np.ndarray, lam: float) -> np.ndarray:
    """
    Args:
        X: P x N design matrix.
        targets: length-P vector or P x C matrix.
        lam: Ridge strength, >= 0.

    Returns:
        N (or N x C) weights.
    """
    if lam < 0:
        raise ParameterError(f"ridge strength must be non-negative, got {lam}")
    P, N = X.shape
    if targets.shape[0] != P:
        raise ParameterError(f"design has {P} rows but targets have {targets.shape[0]}")

    if lam == 0.0:
        w, *_ = linalg.lstsq(X, targets, lapack_driver="gelsd")
        return w

    if N <= P:
        gram = X.T @ X
        gram[np.diag_indices_from(gram)] += lam
        return linalg.cho_solve(linalg.cho_factor(gram, lower=True), X.T @ targets)

    kernel = X @ X.T
    kernel[np.diag_indices_from(kernel)] += lam
    return X.T @ linalg.cho_solve(linalg.cho_factor(kernel, lower=True), targets)
