"""
core/covariance.py

Covariance specifications, ground-truth weights and subsampling plans.

A CovarianceSpec is either explicit (dense M x M signal and noise matrices)
or parametric equicorrelated,

    Sigma_s = s [(1 - c) I + c 1 1^T],    Sigma_0 = omega2 I,

which is never materialized unless asked for. A SubsamplingPlan holds the k
feature masks as sorted index arrays together with the fraction matrix

    nu[r, r'] = |mask_r intersect mask_r'| / M

that every theory module consumes.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
import math
from typing import Any, Optional

import numpy as np
from scipy import linalg

from core.errors import CovarianceError, ParameterError, PlanError
from core.seeding import derive_rng
from utils.logger import get_logger


log = get_logger(__name__)

SYMMETRY_RTOL = 1e-12
PSD_RTOL = 1e-10


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


# ==================== Covariance ====================


class CovarianceKind(str, Enum):
    EXPLICIT = "explicit"
    EQUICORRELATED = "equicorrelated"


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    """Data covariance Sigma_s and feature-noise covariance Sigma_0 over M features."""

    kind: CovarianceKind
    dimension: int
    signal: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    s: Optional[float] = None
    c: Optional[float] = None
    omega2: Optional[float] = None

    # -------------------- constructors
    @classmethod
    def explicit(cls, signal: np.ndarray, noise: Optional[np.ndarray] = None) -> CovarianceSpec:
        signal = np.asarray(signal, dtype=np.float64)
        if signal.ndim != 2 or signal.shape[0] != signal.shape[1] or signal.shape[0] == 0:
            raise CovarianceError(f"signal covariance must be a non-empty square matrix, got shape {signal.shape}")
        M = signal.shape[0]
        noise = np.zeros((M, M)) if noise is None else np.asarray(noise, dtype=np.float64)
        if noise.shape != (M, M):
            raise CovarianceError(f"noise covariance shape {noise.shape} does not match signal ({M}, {M})")
        _check_symmetric_psd(signal, "signal")
        _check_symmetric_psd(noise, "noise")
        return cls(kind=CovarianceKind.EXPLICIT, dimension=M, signal=_frozen(signal), noise=_frozen(noise))

    @classmethod
    def equicorrelated(cls, s: float, c: float, omega2: float, M: int) -> CovarianceSpec:
        _check_equicorrelated(s, c, omega2, M)
        return cls(kind=CovarianceKind.EQUICORRELATED, dimension=int(M), s=float(s), c=float(c), omega2=float(omega2))

    # -------------------- properties
    @property
    def is_equicorrelated(self) -> bool:
        return self.kind is CovarianceKind.EQUICORRELATED

    @property
    def a(self) -> float:
        """s(1-c) + omega2 for the parametric form."""
        if not self.is_equicorrelated:
            raise ParameterError("'a' is only defined for equicorrelated covariances")
        return self.s * (1.0 - self.c) + self.omega2

    # -------------------- dense views
    def signal_matrix(self) -> np.ndarray:
        if self.is_equicorrelated:
            M = self.dimension
            return self.s * ((1.0 - self.c) * np.eye(M) + self.c * np.ones((M, M)))
        return self.signal

    def noise_matrix(self) -> np.ndarray:
        if self.is_equicorrelated:
            return self.omega2 * np.eye(self.dimension)
        return self.noise

    def to_explicit(self) -> CovarianceSpec:
        if not self.is_equicorrelated:
            return self
        return CovarianceSpec(
            kind=CovarianceKind.EXPLICIT,
            dimension=self.dimension,
            signal=_frozen(self.signal_matrix()),
            noise=_frozen(self.noise_matrix()),
        )

    # -------------------- blocks selected by index sets
    def signal_block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        if self.is_equicorrelated:
            same = (rows[:, None] == cols[None, :]).astype(np.float64)
            return self.s * self.c + self.s * (1.0 - self.c) * same
        return self.signal[np.ix_(rows, cols)]

    def noise_block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        if self.is_equicorrelated:
            return self.omega2 * (rows[:, None] == cols[None, :]).astype(np.float64)
        return self.noise[np.ix_(rows, cols)]

    def total_block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """(Sigma_s + Sigma_0) restricted to rows x cols."""
        if self.is_equicorrelated:
            same = (rows[:, None] == cols[None, :]).astype(np.float64)
            return self.s * self.c + self.a * same
        return self.signal[np.ix_(rows, cols)] + self.noise[np.ix_(rows, cols)]

    # -------------------- matrix-vector products without densifying
    def apply_signal(self, x: np.ndarray) -> np.ndarray:
        """Sigma_s @ x for a vector or a matrix of column vectors."""
        if self.is_equicorrelated:
            return self.s * (1.0 - self.c) * x + self.s * self.c * np.sum(x, axis=0, keepdims=x.ndim > 1)
        return self.signal @ x

    def apply_noise(self, x: np.ndarray) -> np.ndarray:
        if self.is_equicorrelated:
            return self.omega2 * x
        return self.noise @ x

    def to_dict(self) -> dict[str, Any]:
        if self.is_equicorrelated:
            return {"kind": self.kind.value, "M": self.dimension, "s": self.s, "c": self.c, "omega2": self.omega2}
        return {"kind": self.kind.value, "M": self.dimension, "signal": self.signal, "noise": self.noise}


def _check_equicorrelated(s: float, c: float, omega2: float, M: int) -> None:
    if not (s > 0 and math.isfinite(s)):
        raise CovarianceError(f"s must be positive, got {s}")
    if not 0.0 <= c <= 1.0:
        raise CovarianceError(f"c must lie in [0, 1], got {c}")
    if not (omega2 >= 0 and math.isfinite(omega2)):
        raise CovarianceError(f"omega2 must be non-negative, got {omega2}")
    if int(M) < 1:
        raise CovarianceError(f"dimension must be positive, got {M}")


def _check_symmetric_psd(m: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(m)):
        raise CovarianceError(f"{name} covariance has non-finite entries")
    scale = float(np.max(np.abs(m))) if m.size else 0.0
    if scale == 0.0:
        return
    asym = float(np.max(np.abs(m - m.T)))
    if asym > SYMMETRY_RTOL * scale:
        raise CovarianceError(f"{name} covariance is not symmetric (max asymmetry {asym:.3e})")
    eig = linalg.eigvalsh(m)
    if eig[0] < -PSD_RTOL * max(eig[-1], 0.0):
        raise CovarianceError(f"{name} covariance is not positive semidefinite (smallest eigenvalue {eig[0]:.3e})")


def build_equicorrelated_covariance(s: float, c: float, omega2: float, M: int) -> CovarianceSpec:
    """Explicit dense form of the equicorrelated model."""
    return CovarianceSpec.equicorrelated(s, c, omega2, M).to_explicit()


def toeplitz_covariance(base: float, M: int, scale: float = 1.0) -> np.ndarray:
    """scale * base^|i-j|, the AR(1)-type covariance."""
    if not 0.0 <= base < 1.0:
        raise CovarianceError(f"Toeplitz base must lie in [0, 1), got {base}")
    return scale * linalg.toeplitz(base ** np.arange(M, dtype=np.float64))


# ==================== Ground truth ====================


class TruthScheme(str, Enum):
    ISOTROPIC = "isotropic"
    SPIKED = "spiked"


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Realized ground-truth weights w*."""

    weights: np.ndarray
    rho: float
    scheme: TruthScheme
    seed: Optional[int] = None

    @property
    def dimension(self) -> int:
        return int(self.weights.shape[0])

    def to_dict(self) -> dict[str, Any]:
        return {"scheme": self.scheme.value, "rho": self.rho, "seed": self.seed, "weights": self.weights}


@dataclass(frozen=True)
class SpikedTruthPrior:
    """
    The spiked ground-truth ensemble w* = sqrt(1-rho^2) P_perp w0 + rho 1 with w0 ~ N(0, I),
    used when errors are averaged over the random part of w* instead of a realization.
    """

    rho: float

    def __post_init__(self) -> None:
        if not -1.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [-1, 1], got {self.rho}")


def sample_ground_truth(rho: float, M: int, seed: int, scheme: TruthScheme | str = TruthScheme.SPIKED) -> GroundTruth:
    """
    Draw ground-truth weights.

    Args:
        rho: Alignment with the all-ones direction, |rho| <= 1 (spiked scheme).
        M: Number of features.
        seed: Master seed; the draw uses the "truth" stream.
        scheme: "spiked" projects w0 orthogonal to 1 and adds rho*1;
            "isotropic" returns w0 unchanged (rho must be 0).

    Returns:
        GroundTruth with read-only weights.
    """
    scheme = TruthScheme(scheme)
    if not -1.0 <= rho <= 1.0:
        raise ParameterError(f"rho must lie in [-1, 1], got {rho}")
    if M < 1:
        raise ParameterError(f"M must be positive, got {M}")
    w0 = derive_rng(seed, "truth").standard_normal(M)
    if scheme is TruthScheme.ISOTROPIC:
        if rho != 0.0:
            raise ParameterError("isotropic ground truth has no alignment; use rho=0 or the spiked scheme")
        return GroundTruth(weights=_frozen(w0), rho=0.0, scheme=scheme, seed=seed)

    w_perp = w0 - w0.mean()
    weights = math.sqrt(1.0 - rho * rho) * w_perp + rho
    return GroundTruth(weights=_frozen(weights), rho=float(rho), scheme=scheme, seed=seed)


# ==================== Subsampling plans ====================


class PlanStrategy(str, Enum):
    HOMOGENEOUS = "homogeneous"
    HETEROGENEOUS = "heterogeneous"
    REPLACEMENT = "replacement"
    EXPLICIT = "explicit"


def fraction_matrix(masks: Sequence[np.ndarray], M: int) -> np.ndarray:
    """nu[r, r'] = overlap count / M, computed from raw index sets."""
    indicator = np.zeros((len(masks), M), dtype=np.int64)
    for r, mask in enumerate(masks):
        indicator[r, mask] = 1
    return (indicator @ indicator.T) / M


@dataclass(frozen=True, eq=False)
class SubsamplingPlan:
    masks: tuple[np.ndarray, ...]
    dimension: int
    fractions: np.ndarray
    exclusive: bool
    strategy: PlanStrategy = PlanStrategy.EXPLICIT
    seed: Optional[int] = None
    raw_fractions: Optional[np.ndarray] = field(default=None)

    @classmethod
    def from_masks(
        cls,
        masks: Sequence[Sequence[int] | np.ndarray],
        M: int,
        strategy: PlanStrategy | str = PlanStrategy.EXPLICIT,
        seed: Optional[int] = None,
        raw_fractions: Optional[np.ndarray] = None,
    ) -> SubsamplingPlan:
        if M < 1:
            raise PlanError(f"dimension must be positive, got {M}")
        if len(masks) == 0:
            raise PlanError("a plan needs at least one mask")
        clean: list[np.ndarray] = []
        for r, mask in enumerate(masks):
            idx = np.asarray(mask, dtype=np.int64).ravel()
            if idx.size == 0:
                raise PlanError(f"mask {r} is empty")
            if idx.min() < 0 or idx.max() >= M:
                raise PlanError(f"mask {r} has indices outside [0, {M - 1}]")
            idx = np.sort(idx)
            if np.any(np.diff(idx) == 0):
                raise PlanError(f"mask {r} contains duplicate indices")
            clean.append(_frozen(idx))

        nu = fraction_matrix(clean, M)
        off = nu - np.diag(np.diag(nu))
        exclusive = bool(np.all(off == 0.0))
        return cls(
            masks=tuple(clean),
            dimension=int(M),
            fractions=_frozen(nu),
            exclusive=exclusive,
            strategy=PlanStrategy(strategy),
            seed=seed,
            raw_fractions=None if raw_fractions is None else _frozen(np.asarray(raw_fractions, dtype=np.float64)),
        )

    @property
    def k(self) -> int:
        return len(self.masks)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([m.size for m in self.masks], dtype=np.int64)

    @property
    def nu_diag(self) -> np.ndarray:
        return np.diag(self.fractions).copy()

    @property
    def is_partition(self) -> bool:
        return self.exclusive and int(self.sizes.sum()) == self.dimension

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "strategy": self.strategy.value,
            "seed": self.seed,
            "M": self.dimension,
            "exclusive": self.exclusive,
            "masks": [m.tolist() for m in self.masks],
            "fractions": self.fractions.tolist(),
        }
        if self.raw_fractions is not None:
            out["raw_fractions"] = self.raw_fractions.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SubsamplingPlan:
        return cls.from_masks(
            data["masks"],
            int(data["M"]),
            strategy=data.get("strategy", PlanStrategy.EXPLICIT),
            seed=data.get("seed"),
            raw_fractions=data.get("raw_fractions"),
        )


def sample_dirichlet_fractions(k: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """
    k fractions drawn i.i.d. Gamma(shape=(k sigma)^-2, scale=k sigma^2), i.e. mean 1/k and
    standard deviation sigma, normalized to sum to one. Equivalent to Dirichlet((k sigma)^-2).
    """
    if k < 1:
        raise PlanError(f"k must be positive, got {k}")
    if not sigma > 0:
        raise PlanError("heterogeneous fractions need sigma > 0; use the homogeneous strategy for sigma = 0")
    shape = (k * sigma) ** -2
    g = rng.gamma(shape, k * sigma * sigma, size=k)
    total = g.sum()
    if not (math.isfinite(total) and total > 0):
        # all variates underflowed for a very small shape
        return rng.dirichlet(np.full(k, shape))
    return g / total


def apportion_largest_remainder(fractions: np.ndarray, M: int, minimum: int = 1) -> np.ndarray:
    """Integer sizes summing to M, closest to fractions*M, each at least ``minimum``."""
    k = len(fractions)
    if k * minimum > M:
        raise PlanError(f"cannot give {k} readouts at least {minimum} of {M} features")
    raw = np.asarray(fractions, dtype=np.float64) * M
    sizes = np.floor(raw).astype(np.int64)
    remainder = M - int(sizes.sum())
    if remainder > 0:
        order = np.argsort(-(raw - sizes), kind="stable")
        sizes[order[:remainder]] += 1
    while np.any(sizes < minimum):
        r = int(np.argmin(sizes))
        donor = int(np.argmax(sizes))
        sizes[donor] -= 1
        sizes[r] += 1
    return sizes


def _even_sizes(k: int, M: int) -> np.ndarray:
    sizes = np.full(k, M // k, dtype=np.int64)
    sizes[: M % k] += 1
    return sizes


def _disjoint_blocks(sizes: np.ndarray, M: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(M)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [perm[bounds[r] : bounds[r + 1]] for r in range(len(sizes))]


def _sizes_from_override(fractions_override: Sequence[float], M: int) -> np.ndarray:
    f = np.asarray(fractions_override, dtype=np.float64)
    if f.ndim != 1 or f.size == 0 or np.any(f <= 0) or np.any(f > 1):
        raise PlanError(f"fraction overrides must lie in (0, 1], got {list(fractions_override)}")
    return np.maximum(1, np.rint(f * M).astype(np.int64))


def sample_subsampling_plan(
    strategy: PlanStrategy | str,
    k: int,
    M: int,
    seed: int,
    sigma: float = 0.0,
    fractions_override: Optional[Sequence[float]] = None,
) -> SubsamplingPlan:
    """
    Draw a subsampling plan.

    Args:
        strategy: "homogeneous" (disjoint, equal sizes summing to M, or the override
            sizes), "heterogeneous" (disjoint, Gamma/Dirichlet fractions) or
            "replacement" (independent uniform masks, overlaps allowed).
        k: Number of readouts, 1 <= k <= M.
        M: Number of features.
        seed: Master seed; the draw uses the "plan" stream.
        sigma: Spread of the heterogeneous fractions (> 0).
        fractions_override: Optional per-readout fractions (length k).

    Returns:
        SubsamplingPlan
    """
    strategy = PlanStrategy(strategy)
    if k < 1:
        raise PlanError(f"k must be positive, got {k}")
    if k > M:
        raise PlanError(f"k={k} readouts cannot each see a feature of M={M}")
    if fractions_override is not None and len(fractions_override) != k:
        raise PlanError(f"expected {k} fraction overrides, got {len(fractions_override)}")
    rng = derive_rng(seed, "plan")

    if strategy is PlanStrategy.HOMOGENEOUS:
        sizes = _even_sizes(k, M) if fractions_override is None else _sizes_from_override(fractions_override, M)
        if int(sizes.sum()) > M:
            raise PlanError(f"exclusive fractions {list(fractions_override)} need more than M={M} features")
        masks = _disjoint_blocks(sizes, M, rng)
        return SubsamplingPlan.from_masks(masks, M, strategy=strategy, seed=seed)

    if strategy is PlanStrategy.HETEROGENEOUS:
        if fractions_override is not None:
            raise PlanError("heterogeneous plans draw their own fractions; drop fractions_override")
        raw = sample_dirichlet_fractions(k, sigma, rng)
        sizes = apportion_largest_remainder(raw, M)
        masks = _disjoint_blocks(sizes, M, rng)
        log.debug("plan.heterogeneous", k=k, M=M, sizes=sizes.tolist())
        return SubsamplingPlan.from_masks(masks, M, strategy=strategy, seed=seed, raw_fractions=raw)

    if strategy is PlanStrategy.REPLACEMENT:
        sizes = _even_sizes(k, M) if fractions_override is None else _sizes_from_override(fractions_override, M)
        masks = [rng.choice(M, size=int(n), replace=False) for n in sizes]
        return SubsamplingPlan.from_masks(masks, M, strategy=strategy, seed=seed)

    raise PlanError("explicit plans are built with SubsamplingPlan.from_masks")
