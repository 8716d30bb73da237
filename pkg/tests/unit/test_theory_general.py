"""
tests/unit/test_theory_general.py

Saddle-point solver and pairwise errors for general covariances.
"""
import math

import numpy as np
import pytest

from core.covariance import (
    CovarianceSpec,
    SpikedTruthPrior,
    SubsamplingPlan,
    sample_ground_truth,
    sample_subsampling_plan,
)
from core.errors import ParameterError
from core.theory_equicorr import EquiTask, ensemble_error_equicorr
from core.theory_general import (
    ErrorMatrix,
    ResolventBasis,
    effective_covariance,
    ensemble_error,
    error_components,
    general_error_matrix,
    saddle_residuals,
    solve_saddle_point,
)


# ==================== ErrorMatrix ====================


def test_ensemble_error_is_mean_of_pairs():
    assert ensemble_error(np.array([[1.0, 2.0], [2.0, 3.0]])) == 2.0


def test_divergent_pair_makes_ensemble_divergent():
    errors = ErrorMatrix.from_pairwise([[1.0, math.inf], [math.inf, 1.0]])
    assert errors.ensemble == math.inf


def test_permuted_keeps_ensemble():
    errors = ErrorMatrix.from_pairwise([[1.0, 0.2, 0.3], [0.2, 2.0, 0.4], [0.3, 0.4, 3.0]])
    swapped = errors.permuted([2, 0, 1])
    assert swapped.pairwise[0, 0] == 3.0
    assert swapped.pairwise[0, 1] == 0.3
    assert swapped.ensemble == pytest.approx(errors.ensemble, rel=1e-15)


def test_error_matrix_dict_form():
    d = ErrorMatrix.from_pairwise([[1.0, 2.0], [2.0, 3.0]]).to_dict()
    assert d == {"pairwise": [[1.0, 2.0], [2.0, 3.0]], "ensemble": 2.0}


def test_non_square_rejected():
    with pytest.raises(ParameterError):
        ErrorMatrix.from_pairwise([[1.0, 2.0]])


# ==================== Saddle point ====================


def test_effective_covariance_scaling(isotropic_cov, three_way_plan):
    """Diagonal of S~_rr is a / nu = 1.1 * 3"""
    block = effective_covariance(isotropic_cov, three_way_plan, 0, 0)
    assert block.shape == (20, 20)
    np.testing.assert_allclose(np.diag(block), 3.3)


def test_saddle_point_residuals(toeplitz_cov):
    plan = sample_subsampling_plan("replacement", 3, 40, seed=1, fractions_override=[0.3, 0.5, 0.7])
    basis = ResolventBasis(toeplitz_cov, plan)
    params = solve_saddle_point(toeplitz_cov, plan, [0.01, 0.05, 0.1], 1.5, basis=basis)
    assert np.all(params.q > 0)
    np.testing.assert_allclose(params.q_hat, 1.5 / (params.lam + params.q), rtol=1e-14)
    assert saddle_residuals(params, basis).max() < 1e-9
    np.testing.assert_allclose(params.gamma, params.gamma.T)
    dumped = params.to_dict()
    assert dumped["alpha"] == 1.5
    assert dumped["lambda"] == [0.01, 0.05, 0.1]
    assert len(dumped["gamma"]) == 3 and len(dumped["residuals"]) == 3


def test_gamma_matches_direct_resolvent_solves(toeplitz_cov):
    """q^_r q^_r' tr[G_r^-1 S~_rr' G_r'^-1 S~_r'r] / (alpha M), with G_r = I + q^_r S~_rr"""
    plan = sample_subsampling_plan("replacement", 3, 40, seed=1, fractions_override=[0.3, 0.5, 0.7])
    alpha = 1.5
    params = solve_saddle_point(toeplitz_cov, plan, [0.01, 0.05, 0.1], alpha)
    for r, rp in [(0, 0), (0, 1), (1, 2)]:
        S_rrp = effective_covariance(toeplitz_cov, plan, r, rp)
        G_r = np.eye(S_rrp.shape[0]) + params.q_hat[r] * effective_covariance(toeplitz_cov, plan, r, r)
        G_rp = np.eye(S_rrp.shape[1]) + params.q_hat[rp] * effective_covariance(toeplitz_cov, plan, rp, rp)
        left = np.linalg.solve(G_r, S_rrp)
        right = np.linalg.solve(G_rp, S_rrp.T)
        direct = params.q_hat[r] * params.q_hat[rp] * np.trace(left @ right) / (alpha * 40)
        assert params.gamma[r, rp] == pytest.approx(direct, rel=1e-10)


def test_isotropic_saddle_point_matches_closed_form(isotropic_cov, three_way_plan):
    """Equal eigenvalues a/nu reduce the trace map to the scalar fixed point"""
    params = solve_saddle_point(isotropic_cov, three_way_plan, 0.05, 2.0)
    task = EquiTask.from_plan(
        three_way_plan, s=1.0, c=0.0, omega2=0.1, zeta=0.0, rho=0.0, eta=0.0, lam=0.05, alpha=2.0
    )
    for r in range(3):
        closed = task.readout_order(r)
        assert params.q[r] == pytest.approx(closed.q, rel=1e-9)
        assert params.q_hat[r] == pytest.approx(closed.q_hat, rel=1e-9)


def test_tiny_lambda_rejected(isotropic_cov, three_way_plan):
    with pytest.raises(ParameterError):
        solve_saddle_point(isotropic_cov, three_way_plan, 1e-9, 2.0)


def test_nonpositive_alpha_rejected(isotropic_cov, three_way_plan):
    with pytest.raises(ParameterError):
        solve_saddle_point(isotropic_cov, three_way_plan, 0.1, 0.0)


def test_dimension_mismatch_rejected(isotropic_cov):
    plan = sample_subsampling_plan("homogeneous", 2, 30, seed=0)
    with pytest.raises(ParameterError):
        ResolventBasis(isotropic_cov, plan)


# ==================== Errors ====================


@pytest.mark.parametrize(
    "c,rho,tol",
    [
        (0.0, 0.0, 1e-2),
        (0.5, 0.3, 5e-2),
    ],
)
def test_general_approaches_equicorrelated_closed_form(c, rho, tol):
    """At M=600 the finite-size corrections are O(1/M)"""
    M = 600
    cov = CovarianceSpec.equicorrelated(1.0, c, 0.1, M)
    plan = sample_subsampling_plan("homogeneous", 3, M, seed=4)
    _, general = general_error_matrix(cov, plan, SpikedTruthPrior(rho), 0.05, 2.0, 0.2, 0.1)
    task = EquiTask.from_plan(plan, s=1.0, c=c, omega2=0.1, zeta=0.2, rho=rho, eta=0.1, lam=0.05, alpha=2.0)
    closed = ensemble_error_equicorr(task)
    assert general.ensemble == pytest.approx(closed.ensemble, rel=tol)
    np.testing.assert_allclose(general.pairwise, closed.pairwise, rtol=tol)


def test_realized_and_averaged_truth_agree_for_large_m():
    M = 2000
    cov = CovarianceSpec.equicorrelated(1.0, 0.0, 0.0, M)
    plan = sample_subsampling_plan("homogeneous", 2, M, seed=1)
    params, averaged = general_error_matrix(cov, plan, SpikedTruthPrior(0.0), 0.1, 1.5, 0.1, 0.0)
    realized = error_components(params, cov, plan, sample_ground_truth(0.0, M, seed=9), 0.1, 0.0)
    assert realized.ensemble == pytest.approx(averaged.ensemble, rel=0.1)


def test_readout_noise_only_on_diagonal(toeplitz_cov):
    plan = SubsamplingPlan.from_masks([np.arange(0, 25), np.arange(15, 40)], 40)
    truth = SpikedTruthPrior(0.0)
    params, quiet = general_error_matrix(toeplitz_cov, plan, truth, 0.1, 2.0, 0.1, 0.0)
    loud = error_components(params, toeplitz_cov, plan, truth, 0.1, [0.3, 0.0])
    gamma = params.gamma[0, 0]
    assert loud.pairwise[0, 0] - quiet.pairwise[0, 0] == pytest.approx(0.09 / (1.0 - gamma), rel=1e-9)
    assert loud.pairwise[0, 1] == pytest.approx(quiet.pairwise[0, 1], rel=1e-12)
    assert loud.pairwise[1, 1] == pytest.approx(quiet.pairwise[1, 1], rel=1e-12)


def test_negative_noise_rejected(toeplitz_cov):
    plan = sample_subsampling_plan("homogeneous", 2, 40, seed=0)
    params = solve_saddle_point(toeplitz_cov, plan, 0.1, 1.0)
    with pytest.raises(ParameterError):
        error_components(params, toeplitz_cov, plan, SpikedTruthPrior(0.0), -0.1, 0.0)
