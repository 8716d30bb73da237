"""
core/theory_general.py

Saddle-point solver and pairwise generalization errors for arbitrary
covariances and subsampling masks.

For readout r with mask A_r (N_r features, nu_r = N_r / M) the effective
covariance is

    S~_rr' = A_r (Sigma_s + Sigma_0) A_r'^T / sqrt(nu_r nu_r')

and the order parameters solve, per readout,

    q_hat_r = alpha / (lam_r + q_r),    q_r = tr[G_r^-1 S~_rr] / M,
    G_r = I + q_hat_r S~_rr.

All resolvent algebra runs in the eigenbasis of S~_rr, computed once per
(covariance, plan) by ResolventBasis and reused across alpha and lambda.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
import math
import threading
from typing import Any, Optional, Union

import numpy as np
from scipy import linalg, optimize

from config import settings
from core.covariance import CovarianceSpec, GroundTruth, SpikedTruthPrior, SubsamplingPlan
from core.errors import CovarianceError, NonConvergence, ParameterError, SingularResolvent
from utils.logger import get_logger


log = get_logger(__name__)

MIN_GENERAL_LAMBDA = 1e-8
DIVERGENCE_GAP = 1e-12

Truth = Union[GroundTruth, SpikedTruthPrior]


# ==================== Result types ====================


@dataclass(frozen=True, eq=False)
class OrderParameters:
    q: np.ndarray
    q_hat: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    alpha: float
    iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def k(self) -> int:
        return int(self.q.shape[0])

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "lambda": self.lam.tolist(),
            "q": self.q.tolist(),
            "q_hat": self.q_hat.tolist(),
            "gamma": self.gamma.tolist(),
            "iterations": self.iterations.tolist(),
            "residuals": self.residuals.tolist(),
        }


@dataclass(frozen=True, eq=False)
class ErrorMatrix:
    """Pairwise expected errors E_rr' (may hold +inf) and the ensemble error E_g."""

    pairwise: np.ndarray
    ensemble: float

    @classmethod
    def from_pairwise(cls, pairwise: np.ndarray | Sequence[Sequence[float]]) -> ErrorMatrix:
        pairwise = np.array(pairwise, dtype=np.float64)
        if pairwise.ndim != 2 or pairwise.shape[0] != pairwise.shape[1]:
            raise ParameterError(f"pairwise errors must be a square matrix, got shape {pairwise.shape}")
        pairwise.setflags(write=False)
        return cls(pairwise=pairwise, ensemble=_mean_with_divergence(pairwise))

    @property
    def k(self) -> int:
        return int(self.pairwise.shape[0])

    def permuted(self, order: Sequence[int]) -> ErrorMatrix:
        idx = np.asarray(order)
        return ErrorMatrix.from_pairwise(self.pairwise[np.ix_(idx, idx)])

    def to_dict(self) -> dict[str, Any]:
        return {"pairwise": self.pairwise.tolist(), "ensemble": self.ensemble}


def _mean_with_divergence(pairwise: np.ndarray) -> float:
    if np.any(np.isposinf(pairwise)):
        return math.inf
    return float(np.mean(pairwise))


def ensemble_error(errors: ErrorMatrix | np.ndarray) -> float:
    """(1/k^2) * sum of all pairwise errors; +inf if any entry diverges."""
    pairwise = errors.pairwise if isinstance(errors, ErrorMatrix) else np.asarray(errors, dtype=np.float64)
    return _mean_with_divergence(pairwise)


# ==================== Effective covariances ====================


def _check_dimensions(cov: CovarianceSpec, plan: SubsamplingPlan) -> None:
    if cov.dimension != plan.dimension:
        raise ParameterError(f"plan is over M={plan.dimension} features but covariance has M={cov.dimension}")


def effective_covariance(cov: CovarianceSpec, plan: SubsamplingPlan, r: int, r_prime: int) -> np.ndarray:
    """(Sigma_s + Sigma_0) restricted to mask_r x mask_r', scaled by 1/sqrt(nu_r nu_r')."""
    _check_dimensions(cov, plan)
    nu = plan.fractions
    scale = 1.0 / math.sqrt(nu[r, r] * nu[r_prime, r_prime])
    return scale * cov.total_block(plan.masks[r], plan.masks[r_prime])


class ResolventBasis:
    """
    Eigendecompositions of every S~_rr and the cross blocks V_r^T S~_rr' V_r'.

    Independent of alpha and lambda, so one basis serves a whole learning curve.
    Pair blocks are stored for r <= r' only.
    """

    def __init__(self, cov: CovarianceSpec, plan: SubsamplingPlan) -> None:
        _check_dimensions(cov, plan)
        self.cov = cov
        self.plan = plan
        self.M = plan.dimension
        self.eigvals: list[np.ndarray] = []
        self.eigvecs: list[np.ndarray] = []
        for r in range(plan.k):
            try:
                e, v = linalg.eigh(effective_covariance(cov, plan, r, r))
            except linalg.LinAlgError as exc:
                raise SingularResolvent(r, f"eigendecomposition failed: {exc}") from exc
            if e[-1] <= 0.0:
                raise CovarianceError(f"readout {r} sees a zero covariance block")
            self.eigvals.append(e)
            self.eigvecs.append(v)
        self._blocks: dict[tuple[int, int], np.ndarray] = {}
        self._projections: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def k(self) -> int:
        return self.plan.k

    def pair_block(self, r: int, r_prime: int) -> np.ndarray:
        """V_r^T S~_rr' V_r' (diagonal blocks are diag(eigvals))."""
        if r > r_prime:
            return self.pair_block(r_prime, r).T
        if r == r_prime:
            return np.diag(self.eigvals[r])
        key = (r, r_prime)
        block = self._blocks.get(key)
        if block is None:
            raw = effective_covariance(self.cov, self.plan, r, r_prime)
            block = self.eigvecs[r].T @ raw @ self.eigvecs[r_prime]
            with self._lock:
                self._blocks.setdefault(key, block)
        return block

    def to_eigenbasis(self, r: int, x: np.ndarray) -> np.ndarray:
        """V_r^T (A_r x) for a length-M vector or an M x n matrix."""
        return self.eigvecs[r].T @ x[self.plan.masks[r]]

    def perp_projection(self, r: int) -> np.ndarray:
        """V_r^T A_r Sigma_s P_perp (N_r x M), used for truth-averaged errors."""
        proj = self._projections.get(r)
        if proj is None:
            mask = self.plan.masks[r]
            rows = self.cov.signal_block(mask, np.arange(self.M))
            rows = rows - rows.sum(axis=1, keepdims=True) / self.M
            proj = self.eigvecs[r].T @ rows
            with self._lock:
                self._projections.setdefault(r, proj)
        return proj


# ==================== Saddle point ====================


def _broadcast(values: float | Sequence[float] | np.ndarray, k: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(k, float(arr))
    if arr.shape != (k,):
        raise ParameterError(f"{name} must be a scalar or have length {k}, got shape {arr.shape}")
    return arr


def _trace_map(eigvals: np.ndarray, M: int, lam: float, alpha: float, q: float) -> float:
    """tr[G^-1 S~] / M at q, with q_hat = alpha / (lam + q)."""
    t = lam + q
    return float(np.sum(eigvals * t / (t + alpha * eigvals))) / M


def _solve_readout(
    r: int,
    eigvals: np.ndarray,
    M: int,
    lam: float,
    alpha: float,
    max_iter: int,
    damping: float,
    rel_tol: float,
    residual_tol: float,
) -> tuple[float, int, float]:
    q = float(np.sum(eigvals)) / M
    rel_change = math.inf
    residual = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = _trace_map(eigvals, M, lam, alpha, q)
        residual = abs(q - g) / q
        if residual < residual_tol and rel_change < rel_tol:
            return q, it, residual
        q_new = (1.0 - damping) * q + damping * g
        rel_change = abs(q_new - q) / q_new
        q = q_new

    if settings.SADDLE_BRACKET_FALLBACK:
        # q - g(q) is negative at 0 and non-negative at the q_hat = 0 value
        hi = float(np.sum(eigvals)) / M
        q_root = optimize.brentq(
            lambda x: x - _trace_map(eigvals, M, lam, alpha, x), 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
            maxiter=1000,
        )
        residual = abs(q_root - _trace_map(eigvals, M, lam, alpha, q_root)) / q_root
        if residual < residual_tol:
            log.debug("saddle.bracket_fallback", readout=r, iterations=it, residual=residual)
            return q_root, it, residual

    raise NonConvergence(r, it, residual)


def solve_saddle_point(
    cov: CovarianceSpec,
    plan: SubsamplingPlan,
    lam: float | Sequence[float] | np.ndarray,
    alpha: float,
    *,
    basis: Optional[ResolventBasis] = None,
    max_iter: Optional[int] = None,
    damping: Optional[float] = None,
) -> OrderParameters:
    """
    Solve the per-readout saddle-point equations and compute gamma.

    gamma_rr' is assembled from the cached per-readout eigenbases of the
    ResolventBasis (projected cross blocks) rather than one linear solve per
    pair. The two agree to rounding; building the basis costs one O(M^3)
    eigendecomposition per readout, amortized over every alpha and lambda.

    Args:
        cov: Covariance specification.
        plan: Subsampling plan over the same M features.
        lam: Ridge strength per readout (scalar broadcasts); must be >= 1e-8.
        alpha: Sample ratio P / M, > 0.
        basis: Precomputed ResolventBasis for (cov, plan).
        max_iter: Iteration budget (settings.SADDLE_MAX_ITER by default).
        damping: Damping tau in q <- (1 - tau) q + tau tr[G^-1 S~]/M.

    Returns:
        OrderParameters

    Raises:
        NonConvergence: iteration budget exhausted.
        SingularResolvent: eigendecomposition or resolvent failure.
    """
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    basis = basis or ResolventBasis(cov, plan)
    k = plan.k
    lam_v = _broadcast(lam, k, "lambda")
    if np.any(lam_v < MIN_GENERAL_LAMBDA):
        raise ParameterError(
            f"the general solver needs lambda >= {MIN_GENERAL_LAMBDA:g}; use the equicorrelated closed forms for lambda -> 0"
        )
    max_iter = max_iter or settings.SADDLE_MAX_ITER
    damping = damping or settings.SADDLE_DAMPING

    q = np.empty(k)
    iterations = np.empty(k, dtype=np.int64)
    residuals = np.empty(k)
    for r in range(k):
        q[r], iterations[r], residuals[r] = _solve_readout(
            r, basis.eigvals[r], basis.M, lam_v[r], alpha, max_iter, damping,
            settings.SADDLE_REL_TOL, settings.SADDLE_RESIDUAL_TOL,
        )
    q_hat = alpha / (lam_v + q)

    denoms = [_resolvent_denominators(basis, q_hat, r) for r in range(k)]
    gamma = np.empty((k, k))
    for r in range(k):
        for rp in range(r, k):
            block = basis.pair_block(r, rp)
            trace = float(np.sum(block * block / np.outer(denoms[r], denoms[rp])))
            gamma[r, rp] = gamma[rp, r] = q_hat[r] * q_hat[rp] * trace / (alpha * basis.M)

    log.debug("saddle.converged", k=k, alpha=alpha, iterations=iterations.tolist(), max_residual=float(residuals.max()))
    return OrderParameters(
        q=q, q_hat=q_hat, gamma=gamma, lam=lam_v, alpha=float(alpha), iterations=iterations, residuals=residuals
    )


def saddle_residuals(params: OrderParameters, basis: ResolventBasis) -> np.ndarray:
    """Relative residual of q_r = tr[G_r^-1 S~_rr]/M at the reported solution."""
    out = np.empty(params.k)
    for r in range(params.k):
        d = 1.0 + params.q_hat[r] * basis.eigvals[r]
        out[r] = abs(params.q[r] - float(np.sum(basis.eigvals[r] / d)) / basis.M) / params.q[r]
    return out


def _resolvent_denominators(basis: ResolventBasis, q_hat: np.ndarray, r: int) -> np.ndarray:
    d = 1.0 + q_hat[r] * basis.eigvals[r]
    if not np.all(np.isfinite(d)) or d.min() <= 1e-14 * d.max():
        raise SingularResolvent(r, f"smallest eigenvalue of G is {d.min():.3e}")
    return d


# ==================== Errors ====================


def error_components(
    params: OrderParameters,
    cov: CovarianceSpec,
    plan: SubsamplingPlan,
    truth: Truth,
    zeta: float,
    eta: float | Sequence[float] | np.ndarray,
    *,
    basis: Optional[ResolventBasis] = None,
) -> ErrorMatrix:
    """
    Pairwise expected errors for solved order parameters.

    Each entry combines the noise term (gamma zeta^2 + delta eta_r^2), the signal
    term w*^T Sigma_s w* / M, two subtractive resolvent contractions and the
    cross contraction, all over (1 - gamma). Entries with 1 - gamma <= 1e-12
    are +inf.

    With a GroundTruth the contractions use the realized weights. With a
    SpikedTruthPrior they are averaged over w* = sqrt(1-rho^2) P_perp w0 + rho 1,
    w0 ~ N(0, I).
    """
    basis = basis or ResolventBasis(cov, plan)
    k = plan.k
    M = basis.M
    eta_v = _broadcast(eta, k, "eta")
    if zeta < 0 or np.any(eta_v < 0):
        raise ParameterError("noise scales must be non-negative")
    nu = plan.nu_diag
    q_hat = params.q_hat
    denoms = [_resolvent_denominators(basis, q_hat, r) for r in range(k)]

    if isinstance(truth, GroundTruth):
        if truth.dimension != M:
            raise ParameterError(f"ground truth has {truth.dimension} weights, expected {M}")
        signal, sub, cross = _realized_contractions(basis, truth.weights, denoms)
    elif isinstance(truth, SpikedTruthPrior):
        signal, sub, cross = _averaged_contractions(basis, truth.rho, denoms)
    else:
        raise ParameterError(f"unsupported truth type {type(truth).__name__}")

    pairwise = np.empty((k, k))
    for r in range(k):
        for rp in range(r, k):
            gamma = params.gamma[r, rp]
            if 1.0 - gamma <= DIVERGENCE_GAP:
                pairwise[r, rp] = pairwise[rp, r] = math.inf
                continue
            noise = gamma * zeta * zeta + (eta_v[r] ** 2 if r == rp else 0.0)
            contraction = signal - q_hat[r] * sub[r] / nu[r] - q_hat[rp] * sub[rp] / nu[rp]
            contraction += q_hat[r] * q_hat[rp] * cross[r, rp] / math.sqrt(nu[r] * nu[rp])
            pairwise[r, rp] = pairwise[rp, r] = (noise + contraction / M) / (1.0 - gamma)
    return ErrorMatrix.from_pairwise(pairwise)


def _realized_contractions(
    basis: ResolventBasis, w: np.ndarray, denoms: list[np.ndarray]
) -> tuple[float, np.ndarray, np.ndarray]:
    k = basis.k
    b = basis.cov.apply_signal(w)
    signal = float(w @ b)
    coeffs = [basis.to_eigenbasis(r, b) for r in range(k)]
    sub = np.array([float(np.sum(coeffs[r] ** 2 / denoms[r])) for r in range(k)])
    cross = np.empty((k, k))
    for r in range(k):
        u_r = coeffs[r] / denoms[r]
        for rp in range(r, k):
            u_rp = coeffs[rp] / denoms[rp]
            cross[r, rp] = cross[rp, r] = float(u_r @ basis.pair_block(r, rp) @ u_rp)
    return signal, sub, cross


def _averaged_contractions(
    basis: ResolventBasis, rho: float, denoms: list[np.ndarray]
) -> tuple[float, np.ndarray, np.ndarray]:
    k = basis.k
    M = basis.M
    beta2 = 1.0 - rho * rho
    # aligned part: the realized contractions of w = 1
    signal_1, sub_1, cross_1 = _realized_contractions(basis, np.ones(M), denoms)
    if beta2 == 0.0:
        return rho * rho * signal_1, rho * rho * sub_1, rho * rho * cross_1

    cov = basis.cov
    if cov.is_equicorrelated:
        trace_perp = cov.s * (1.0 - cov.c) * (M - 1)
    else:
        trace_perp = float(np.trace(cov.signal)) - float(np.sum(cov.signal)) / M
    projections = [basis.perp_projection(r) for r in range(k)]
    sub_perp = np.array([float(np.sum(projections[r] ** 2 / denoms[r][:, None])) for r in range(k)])
    cross_perp = np.empty((k, k))
    for r in range(k):
        left = projections[r] / denoms[r][:, None]
        for rp in range(r, k):
            right = projections[rp] / denoms[rp][:, None]
            cross_perp[r, rp] = cross_perp[rp, r] = float(np.sum(left * (basis.pair_block(r, rp) @ right)))

    return (
        beta2 * trace_perp + rho * rho * signal_1,
        beta2 * sub_perp + rho * rho * sub_1,
        beta2 * cross_perp + rho * rho * cross_1,
    )


def general_error_matrix(
    cov: CovarianceSpec,
    plan: SubsamplingPlan,
    truth: Truth,
    lam: float | Sequence[float] | np.ndarray,
    alpha: float,
    zeta: float,
    eta: float | Sequence[float] | np.ndarray,
    *,
    basis: Optional[ResolventBasis] = None,
) -> tuple[OrderParameters, ErrorMatrix]:
    """Convenience: solve the saddle point and assemble the errors in one call."""
    basis = basis or ResolventBasis(cov, plan)
    params = solve_saddle_point(cov, plan, lam, alpha, basis=basis)
    return params, error_components(params, cov, plan, truth, zeta, eta, basis=basis)
