"""
core/theory_equicorr.py

Closed forms for the equicorrelated model

    Sigma_s = s[(1-c) I + c 1 1^T],   Sigma_0 = omega2 I,
    w* = sqrt(1-rho^2) P_perp w0 + rho 1,

with a = s(1-c) + omega2. Per readout the order parameters reduce to the scalar
S_r = q_hat_r / (nu_r + a q_hat_r), and the pairwise error is

    E_rr' = [(1-rho^2) I0_rr' + rho^2 I1_rr' + gamma_rr' zeta^2 + delta_rr' eta_r^2] / (1 - gamma_rr'),
    gamma_rr' = a^2 nu_rr' S_r S_r' / alpha.

The reduced variables (H, W, Z, Lambda) divide every noise variance and the
ridge by s(1-c); for exclusive equal masks (nu = 1/k) the ensemble error is
s(1-c) times a function of (k, rho, alpha, H, W, Z, Lambda) only.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import Enum
import math
from typing import NamedTuple, Optional, Union

import numpy as np

from core.covariance import SubsamplingPlan
from core.errors import ParameterError
from core.theory_general import DIVERGENCE_GAP, ErrorMatrix
from utils.logger import get_logger


log = get_logger(__name__)

THRESHOLD_GAP = 1e-12
REDUCED_D_FLOOR = 1e-14
K_SCAN_MAX = 100
K_INFINITY_MARGIN = 1e-12

KValue = Union[int, float]


# ==================== Order parameters ====================


class ClosedFormOrder(NamedTuple):
    q: float
    q_hat: float
    S: float


def solve_order_params_closed_form(a: float, nu: float, alpha: float, lam: float) -> ClosedFormOrder:
    """
    Positive-q solution of q = a nu / (nu + a q_hat), q_hat = alpha / (lam + q).

    Every radical is evaluated in whichever of its two algebraically equal
    forms adds positive terms, so lam -> 0 and alpha -> nu stay accurate.
    At lam = 0 with alpha >= nu, q_hat is +inf and q is 0.
    """
    if not a > 0:
        raise ParameterError(f"a = s(1-c) + omega2 must be positive, got {a}")
    if not 0.0 < nu <= 1.0:
        raise ParameterError(f"nu must lie in (0, 1], got {nu}")
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    if not lam >= 0:
        raise ParameterError(f"lambda must be non-negative, got {lam}")

    if math.isinf(alpha):
        return ClosedFormOrder(q=0.0, q_hat=math.inf, S=1.0 / a)

    x = math.sqrt((a * alpha - a * nu + lam * nu) ** 2 + 4.0 * a * lam * nu * nu)
    S = 2.0 * alpha / (a * alpha + nu * (lam + a) + x)

    # q: x - m == 4 a lam nu^2 / (x + m), m = a alpha - (a - lam) nu
    m = a * alpha - (a - lam) * nu
    q = 2.0 * a * lam * nu / (x + m) if m > 0 else (x - m) / (2.0 * nu)

    # q_hat: x + n == 4 a alpha lam nu / (x - n), n = a alpha - (a + lam) nu
    n = a * alpha - (a + lam) * nu
    if n < 0 or lam == 0.0:
        gap = x - n
        q_hat = 2.0 * alpha * nu / gap if gap > 0 else math.inf
    else:
        q_hat = (x + n) / (2.0 * a * lam)
    return ClosedFormOrder(q=q, q_hat=q_hat, S=S)


def ridgeless_S(a: float, nu: float, alpha: float) -> float:
    """S at lam = 0: 1/a for alpha > nu, alpha/(a nu) for alpha < nu."""
    return 2.0 * alpha / (a * (alpha + nu + abs(alpha - nu)))


# ==================== Task ====================


@dataclass(frozen=True, eq=False)
class EquiTask:
    s: float
    c: float
    omega2: float
    zeta: float
    rho: float
    eta: np.ndarray
    lam: np.ndarray
    alpha: float
    nu: np.ndarray

    def __post_init__(self) -> None:
        if not self.s > 0:
            raise ParameterError(f"s must be positive, got {self.s}")
        if not 0.0 <= self.c <= 1.0:
            raise ParameterError(f"c must lie in [0, 1], got {self.c}")
        if self.omega2 < 0 or self.zeta < 0:
            raise ParameterError("noise variances must be non-negative")
        if not -1.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [-1, 1], got {self.rho}")
        if self.c == 1.0 and self.omega2 == 0.0:
            raise ParameterError("c = 1 without feature noise leaves a = 0; the closed forms are undefined")
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        nu = np.asarray(self.nu, dtype=np.float64)
        k = nu.shape[0]
        if nu.shape != (k, k) or k == 0:
            raise ParameterError(f"nu must be a non-empty square matrix, got shape {nu.shape}")
        diag = np.diag(nu)
        if np.any(diag <= 0) or np.any(diag > 1):
            raise ParameterError("diagonal fractions must lie in (0, 1]")
        if not np.allclose(nu, nu.T, rtol=0, atol=1e-15):
            raise ParameterError("nu must be symmetric")
        if np.any(nu > np.minimum.outer(diag, diag) + 1e-15) or np.any(nu < 0):
            raise ParameterError("overlaps nu_rr' must lie in [0, min(nu_rr, nu_r'r')]")
        for name in ("eta", "lam"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim == 0:
                arr = np.full(k, float(arr))
            if arr.shape != (k,) or np.any(arr < 0):
                raise ParameterError(f"{name} must be non-negative with length {k}")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "nu", nu)

    @classmethod
    def from_plan(
        cls,
        plan: SubsamplingPlan,
        *,
        s: float,
        c: float,
        omega2: float,
        zeta: float,
        rho: float,
        eta: float | Sequence[float],
        lam: float | Sequence[float],
        alpha: float,
        use_raw_fractions: bool = False,
    ) -> EquiTask:
        if use_raw_fractions and plan.raw_fractions is not None:
            nu = np.diag(plan.raw_fractions)
        else:
            nu = plan.fractions
        return cls(s=s, c=c, omega2=omega2, zeta=zeta, rho=rho, eta=eta, lam=lam, alpha=alpha, nu=nu)

    @classmethod
    def exclusive(cls, fractions: Sequence[float], **params: float | Sequence[float]) -> EquiTask:
        """Task with disjoint masks of the given fractions."""
        return cls(nu=np.diag(np.asarray(fractions, dtype=np.float64)), **params)

    @property
    def k(self) -> int:
        return int(self.nu.shape[0])

    @property
    def a(self) -> float:
        return self.s * (1.0 - self.c) + self.omega2

    @property
    def effective_scale(self) -> float:
        """s(1-c), the unit of the reduced variables."""
        return self.s * (1.0 - self.c)

    def with_alpha(self, alpha: float) -> EquiTask:
        return replace(self, alpha=alpha)

    def readout_order(self, r: int) -> ClosedFormOrder:
        return solve_order_params_closed_form(self.a, float(self.nu[r, r]), self.alpha, float(self.lam[r]))


# ==================== Pairwise errors ====================


def _at_threshold(task: EquiTask, r: int) -> bool:
    return task.lam[r] == 0.0 and abs(task.alpha - task.nu[r, r]) < THRESHOLD_GAP


def pairwise_error_equicorr(task: EquiTask, r: int, r_prime: int, *, _S: Optional[np.ndarray] = None) -> float:
    """E_rr' for the equicorrelated model; +inf at divergence."""
    if _at_threshold(task, r) or _at_threshold(task, r_prime):
        return math.inf
    S_r = _S[r] if _S is not None else task.readout_order(r).S
    S_rp = _S[r_prime] if _S is not None else task.readout_order(r_prime).S
    nu_r, nu_rp, nu_x = task.nu[r, r], task.nu[r_prime, r_prime], task.nu[r, r_prime]
    a = task.a
    u = task.effective_scale

    gamma = 0.0 if math.isinf(task.alpha) else a * a * nu_x * S_r * S_rp / task.alpha
    if 1.0 - gamma <= DIVERGENCE_GAP:
        return math.inf

    I0 = u * (1.0 - u * nu_r * S_r - u * nu_rp * S_rp + a * u * nu_x * S_r * S_rp)
    if task.c > 0.0:
        I1 = (u * (nu_x - nu_r * nu_rp) + task.omega2 * nu_x) / (nu_r * nu_rp)
    else:
        I1 = I0
    rho2 = task.rho * task.rho
    noise = gamma * task.zeta * task.zeta + (task.eta[r] ** 2 if r == r_prime else 0.0)
    return ((1.0 - rho2) * I0 + rho2 * I1 + noise) / (1.0 - gamma)


def ensemble_error_equicorr(task: EquiTask) -> ErrorMatrix:
    k = task.k
    S = np.array([task.readout_order(r).S for r in range(k)])
    pairwise = np.empty((k, k))
    for r in range(k):
        for rp in range(r, k):
            pairwise[r, rp] = pairwise[rp, r] = pairwise_error_equicorr(task, r, rp, _S=S)
    return ErrorMatrix.from_pairwise(pairwise)


def equicorr_gamma(task: EquiTask) -> np.ndarray:
    S = np.array([task.readout_order(r).S for r in range(task.k)])
    if math.isinf(task.alpha):
        return np.zeros((task.k, task.k))
    return task.a**2 * task.nu * np.outer(S, S) / task.alpha


# ==================== Ridgeless special cases ====================


def single_readout_ridgeless_error(alpha: float, nu: float, zeta: float) -> float:
    """Isotropic (s=1, c=0), noiseless-feature single readout at lambda = 0."""
    if not 0.0 < nu <= 1.0 or not alpha > 0:
        raise ParameterError("need alpha > 0 and nu in (0, 1]")
    if abs(alpha - nu) < THRESHOLD_GAP:
        return math.inf
    z2 = zeta * zeta
    if alpha < nu:
        return nu / (nu - alpha) * ((1.0 - nu) + (alpha - nu) ** 2 / nu) + alpha * z2 / (nu - alpha)
    return alpha * (1.0 - nu) / (alpha - nu) + nu * z2 / (alpha - nu)


def ridgeless_diagonal_error(
    s: float, c: float, omega2: float, nu: float, alpha: float, zeta: float, eta: float, rho: float
) -> float:
    """
    Diagonal ridgeless error E_rr with every noise source, written as the
    isotropic-part and aligned-part closed forms blended by rho^2.
    """
    if abs(alpha - nu) < THRESHOLD_GAP:
        return math.inf
    u = s * (1.0 - c)
    a = u + omega2
    z2, e2 = zeta * zeta, eta * eta
    if alpha < nu:
        amp = nu / (nu - alpha)
        part0 = u * amp * (1.0 + u * alpha * (alpha - 2.0 * nu) / (nu * a))
        noise = (alpha * z2 + nu * e2) / (nu - alpha)
    else:
        amp = alpha / (alpha - nu)
        part0 = u * amp * (1.0 - u * nu / a)
        noise = (nu * z2 + alpha * e2) / (alpha - nu)
    part1 = amp * (u * (1.0 - nu) + omega2) / nu if c > 0.0 else part0
    rho2 = rho * rho
    return (1.0 - rho2) * part0 + rho2 * part1 + noise


def infinite_data_error(k: int, nu_diag: Sequence[float], s: float, eta: float) -> float:
    """alpha -> inf error for isotropic data (c = 0, omega = 0), exclusive masks, uniform eta."""
    nu_diag = np.asarray(nu_diag, dtype=np.float64)
    if nu_diag.shape != (k,):
        raise ParameterError(f"expected {k} fractions, got {nu_diag.shape}")
    return s * (1.0 - (2.0 - 1.0 / k) * float(np.mean(nu_diag))) + eta * eta / k


# ==================== Locally optimal regularization ====================


def optimal_local_regularization(
    s: float, c: float, nu: float, rho: float, zeta: float, eta: float, omega2: float = 0.0
) -> float:
    """
    Ridge minimizing each member's own error E_rr; independent of alpha.

    For c = 0 the alignment is irrelevant and the rho = 0 form is used, which
    for omega2 = 0 equals (zeta^2 + eta^2)/nu + s(1/nu - 1). Negative values are
    clamped to 0 with a warning.
    """
    if not 0.0 < nu <= 1.0:
        raise ParameterError(f"nu must lie in (0, 1], got {nu}")
    if not s > 0 or not 0.0 <= c < 1.0:
        raise ParameterError("need s > 0 and c in [0, 1)")
    rho2 = 0.0 if c == 0.0 else rho * rho
    if rho2 >= 1.0:
        raise ParameterError("rho^2 = 1 with c > 0 has no finite locally optimal ridge")
    u = s * (1.0 - c)
    a = u + omega2
    inner = a * (nu * (zeta * zeta + eta * eta) + a * rho2 + u * nu * (1.0 - 2.0 * rho2)) / (u * u * nu * nu * (1.0 - rho2))
    lam_star = a * (inner - 1.0)
    if lam_star < 0.0:
        log.warning("lambda_star.clamped", raw=lam_star, s=s, c=c, nu=nu, rho=rho)
        return 0.0
    return lam_star


# ==================== Reduced errors ====================


class RegMode(str, Enum):
    RIDGELESS = "ridgeless"
    LOCALLY_OPTIMAL = "locally_optimal"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class ReducedPoint:
    """Reduced coordinates; for isotropic data (c = 0) use rho = 0."""

    k: KValue
    alpha: float
    rho: float = 0.0
    Lambda: float = 0.0
    H: float = 0.0
    W: float = 0.0
    Z: float = 0.0

    def __post_init__(self) -> None:
        if not (self.k == math.inf or (int(self.k) == self.k and self.k >= 1)):
            raise ParameterError(f"k must be a positive integer or inf, got {self.k}")
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if min(self.Lambda, self.H, self.W, self.Z) < 0:
            raise ParameterError("Lambda, H, W and Z must be non-negative")
        if not -1.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [-1, 1], got {self.rho}")

    @classmethod
    def from_task(cls, task: EquiTask, k: Optional[KValue] = None) -> ReducedPoint:
        """Reduce a task with uniform eta and lambda; k defaults to the task's readout count."""
        u = task.effective_scale
        if u <= 0:
            raise ParameterError("reduced variables need c < 1")
        return cls(
            k=task.k if k is None else k,
            alpha=task.alpha,
            rho=task.rho,
            Lambda=float(task.lam[0]) / u,
            H=float(task.eta[0]) ** 2 / u,
            W=task.omega2 / u,
            Z=task.zeta**2 / u,
        )

    def with_(self, **changes: float) -> ReducedPoint:
        return replace(self, **changes)


def reduced_S(nu: float, alpha: float, Lambda: float, W: float) -> float:
    """Reduced S (S times s(1-c)) for fraction nu; exact at Lambda = 0 and alpha = inf."""
    if math.isinf(alpha):
        return 1.0 / (1.0 + W)
    X = math.sqrt((alpha * (W + 1.0) + nu * (Lambda - W - 1.0)) ** 2 + 4.0 * Lambda * nu * nu * (W + 1.0))
    return 2.0 * alpha / (alpha * (1.0 + W) + nu * (Lambda + 1.0 + W) + X)


def optimal_reduced_regularization(k: KValue, rho: float, H: float, W: float, Z: float) -> float:
    """
    Lambda* = lambda*/(s(1-c)) at nu = 1/k, clamped at 0.

    rho^2 = 1 is rejected for every H, W, Z: the (1 - rho^2) denominator vanishes
    and the error has no finite minimizer in Lambda.

    Raises:
        ParameterError: rho^2 >= 1.
    """
    rho2 = rho * rho
    if rho2 >= 1.0:
        raise ParameterError("rho^2 = 1 has no finite locally optimal ridge")
    if k == math.inf:
        return math.inf
    nu = 1.0 / k
    w1 = 1.0 + W
    raw = w1 * (w1 * (nu * (Z + H) + w1 * rho2 + nu * (1.0 - 2.0 * rho2)) / (nu * nu * (1.0 - rho2)) - 1.0)
    return max(raw, 0.0)


def asymptotic_reduced_error(rho: float, W: float) -> float:
    """k -> inf limit, identical for ridgeless and locally optimal ridge."""
    return 1.0 - rho * rho + rho * rho * W


def _resolve_lambda(point: ReducedPoint, reg_mode: RegMode) -> float:
    if reg_mode is RegMode.RIDGELESS:
        return 0.0
    if reg_mode is RegMode.LOCALLY_OPTIMAL:
        return optimal_reduced_regularization(point.k, point.rho, point.H, point.W, point.Z)
    return point.Lambda


def reduced_error(point: ReducedPoint, reg_mode: RegMode | str = RegMode.EXPLICIT) -> float:
    """
    Reduced ensemble error for k disjoint readouts of fraction 1/k each.

    Multiply by s(1-c) to recover E_g. +inf at the ridgeless threshold alpha = 1/k.
    """
    reg_mode = RegMode(reg_mode)
    if point.k == math.inf:
        return asymptotic_reduced_error(point.rho, point.W)
    k = float(point.k)
    nu = 1.0 / k
    rho2 = point.rho * point.rho
    H, W, Z, alpha = point.H, point.W, point.Z, point.alpha
    w1 = 1.0 + W
    Lambda = _resolve_lambda(point, reg_mode)

    if math.isinf(alpha):
        S = 1.0 / w1
        e_diag = (1.0 - rho2) * (1.0 - S / k) + rho2 * (k * w1 - 1.0) + H
    else:
        if Lambda == 0.0 and abs(alpha - nu) < THRESHOLD_GAP:
            return math.inf
        S = reduced_S(nu, alpha, Lambda, W)
        D = alpha * k - S * S * w1 * w1
        if D <= REDUCED_D_FLOOR:
            return math.inf
        N1 = alpha * (H + 1.0) * k + S * (S * w1 * (alpha + W * Z + Z) - 2.0 * alpha)
        N2 = alpha * rho2 * (k - S) * (W * (k + S) + k + S - 2.0)
        e_diag = (N1 + N2) / D
    e_off = 2.0 * (rho2 - 1.0) * S / k - 2.0 * rho2 + 1.0
    return e_diag / k + (k - 1.0) * e_off / k


class LargeKExpansion(NamedTuple):
    constant: float
    inverse_k: float


def reduced_error_large_k(point: ReducedPoint, reg_mode: RegMode | str = RegMode.RIDGELESS) -> LargeKExpansion:
    """
    E(k) = constant + inverse_k / k + O(1/k^2).

    Ridgeless: the coefficient's sign decides whether E approaches its limit
    from below (finite k*) or above. Locally optimal: the coefficient is H.
    """
    reg_mode = RegMode(reg_mode)
    rho2 = point.rho * point.rho
    w1 = 1.0 + point.W
    constant = asymptotic_reduced_error(point.rho, point.W)
    if reg_mode is RegMode.LOCALLY_OPTIMAL:
        return LargeKExpansion(constant, point.H)
    if reg_mode is not RegMode.RIDGELESS:
        raise ParameterError("the large-k expansion is available for ridgeless and locally optimal ridge")
    if math.isinf(point.alpha):
        return LargeKExpansion(constant, point.H + 2.0 * (rho2 - 1.0) / w1)
    coeff = (w1 * w1 * rho2 + point.alpha * (-2.0 + point.H * w1 + 2.0 * rho2)) / (w1 * point.alpha)
    return LargeKExpansion(constant, coeff)


class OptimalK(NamedTuple):
    k: KValue
    error: float


def optimal_k(
    H: float,
    W: float,
    Z: float,
    rho: float,
    alpha: float,
    reg_mode: RegMode | str = RegMode.RIDGELESS,
    k_max: int = K_SCAN_MAX,
) -> OptimalK:
    """
    Ensemble size minimizing the reduced error over k = 1..k_max and k = inf.

    Ties go to the smaller k; inf wins only when it beats every finite k by
    more than 1e-12. Divergent entries rank last.
    """
    reg_mode = RegMode(reg_mode)
    if reg_mode is RegMode.EXPLICIT:
        raise ParameterError("optimal_k scans ridgeless or locally optimal ridge")
    best_k: KValue = 1
    best = math.inf
    for k in range(1, k_max + 1):
        e = reduced_error(ReducedPoint(k=k, alpha=alpha, rho=rho, H=H, W=W, Z=Z), reg_mode)
        if e < best:
            best_k, best = k, e
    e_inf = asymptotic_reduced_error(rho, W)
    if e_inf < best - K_INFINITY_MARGIN:
        return OptimalK(math.inf, e_inf)
    return OptimalK(best_k, best)


def noise_dominated_boundary(rho: float, H: float, W: float) -> Optional[float]:
    """
    Ridgeless boundary alpha between finite k* (above) and k* = inf (below);
    None when the whole alpha axis is noise dominated.
    """
    denom = 2.0 * (1.0 - rho * rho) - H * (1.0 + W)
    if denom <= 0.0:
        return None
    return (1.0 + W) ** 2 * rho * rho / denom
