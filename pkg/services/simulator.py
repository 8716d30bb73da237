"""
services/simulator.py

Monte-Carlo verification engine.

Finite-size datasets are drawn from a CovarianceSpec, each readout is trained
by ridge (or the minimum-norm pseudoinverse at lam = 0) on its feature mask,
and the generalization error of the trained ensemble is evaluated exactly as a
quadratic form in the covariances, so no test set is sampled:

    v_r  = A_r^T w_r / sqrt(N_r),     v* = w* / sqrt(M)
    E_rr' = (v* - v_r)^T Sigma_s (v* - v_r') + v_r^T Sigma_0 v_r' + delta_rr' eta_r^2
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
import math
from typing import Any, Optional

import numpy as np
from scipy import linalg

from core.covariance import CovarianceSpec, GroundTruth, SubsamplingPlan
from core.errors import CovarianceError, ParameterError
from core.ridge import solve_ridge
from core.seeding import derive_rng, derive_seed
from core.theory_general import ErrorMatrix
from utils.logger import get_logger


log = get_logger(__name__)

TEST_BLOCK = 4096


# ==================== Data ====================


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    clean: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    truth: GroundTruth
    zeta: float
    seed: int
    stream: tuple[int, ...] = ()

    @property
    def P(self) -> int:
        return int(self.features.shape[0])

    @property
    def M(self) -> int:
        return int(self.features.shape[1])


@lru_cache(maxsize=8)
def _square_root(cov: CovarianceSpec, which: str) -> Optional[np.ndarray]:
    """Lower factor L with L L^T = Sigma, or None for a zero matrix."""
    m = cov.signal_matrix() if which == "signal" else cov.noise_matrix()
    if not np.any(m):
        return None
    try:
        return linalg.cholesky(m, lower=True)
    except linalg.LinAlgError:
        # semidefinite input passed validation; factor through the spectrum instead
        eig, vecs = linalg.eigh(m)
        if eig[0] < -1e-10 * max(eig[-1], 0.0):
            raise CovarianceError(f"{which} covariance has no real square root (eigenvalue {eig[0]:.3e})") from None
        return vecs * np.sqrt(np.clip(eig, 0.0, None))


def _draw_features(cov: CovarianceSpec, P: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    M = cov.dimension
    if cov.is_equicorrelated:
        z = rng.standard_normal((P, M))
        g = rng.standard_normal((P, 1))
        clean = math.sqrt(cov.s * (1.0 - cov.c)) * z + math.sqrt(cov.s * cov.c) * g
        noise = math.sqrt(cov.omega2) * rng.standard_normal((P, M)) if cov.omega2 > 0 else 0.0
        return clean, clean + noise

    L_s = _square_root(cov, "signal")
    clean = rng.standard_normal((P, M)) @ L_s.T if L_s is not None else np.zeros((P, M))
    L_0 = _square_root(cov, "noise")
    if L_0 is None:
        return clean, clean.copy()
    return clean, clean + rng.standard_normal((P, M)) @ L_0.T


def generate_dataset(
    cov: CovarianceSpec,
    truth: GroundTruth,
    zeta: float,
    P: int,
    seed: int,
    *,
    stream: Sequence[int] = (),
) -> SyntheticDataset:
    """
    P i.i.d. rows psi ~ N(0, Sigma_s), psi_bar = psi + sigma with sigma ~ N(0, Sigma_0),
    labels y = w*^T psi / sqrt(M) + eps, eps ~ N(0, zeta^2). Draws come from the
    "data" stream indexed by ``stream``.
    """
    if P < 1:
        raise ParameterError(f"P must be positive, got {P}")
    if zeta < 0:
        raise ParameterError(f"zeta must be non-negative, got {zeta}")
    if truth.dimension != cov.dimension:
        raise ParameterError(f"ground truth has M={truth.dimension} but covariance has M={cov.dimension}")
    rng = derive_rng(seed, "data", *stream)
    clean, noisy = _draw_features(cov, P, rng)
    eps = rng.standard_normal(P)
    labels = clean @ truth.weights / math.sqrt(cov.dimension) + zeta * eps
    for a in (clean, noisy, labels):
        a.setflags(write=False)
    return SyntheticDataset(
        clean=clean, features=noisy, labels=labels, truth=truth, zeta=float(zeta), seed=seed, stream=tuple(stream)
    )


# ==================== Training ====================


@dataclass(frozen=True, eq=False)
class TrainedEnsemble:
    weights: tuple[np.ndarray, ...]
    plan: SubsamplingPlan
    lam: np.ndarray
    eta: np.ndarray
    seed: int
    stream: tuple[int, ...] = ()

    @property
    def k(self) -> int:
        return len(self.weights)

    def readout_directions(self) -> np.ndarray:
        """M x k matrix whose columns are A_r^T w_r / sqrt(N_r)."""
        M = self.plan.dimension
        V = np.zeros((M, self.k))
        for r, (w, mask) in enumerate(zip(self.weights, self.plan.masks)):
            V[mask, r] = w / math.sqrt(mask.size)
        return V


def _as_rng(noise: np.random.Generator | int) -> np.random.Generator:
    return noise if isinstance(noise, np.random.Generator) else derive_rng(int(noise), "train-noise")


def train_readout(
    data: SyntheticDataset,
    mask: np.ndarray,
    lam: float,
    eta: float,
    noise: np.random.Generator | int,
) -> np.ndarray:
    """
    Ridge readout on the masked features; targets are y - xi with xi ~ N(0, eta^2).

    Design rows are A_r psi_bar / sqrt(N_r). lam = 0 returns the minimum-norm
    least-squares solution.
    """
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0 or mask.min() < 0 or mask.max() >= data.M:
        raise ParameterError(f"mask must select indices in [0, {data.M - 1}]")
    if eta < 0:
        raise ParameterError(f"eta must be non-negative, got {eta}")
    rng = _as_rng(noise)
    X = data.features[:, mask] / math.sqrt(mask.size)
    xi = eta * rng.standard_normal(data.P)
    return solve_ridge(X, data.labels - xi, lam)


def _per_readout(values: float | Sequence[float] | np.ndarray, k: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(k, float(arr))
    if arr.shape != (k,):
        raise ParameterError(f"{name} needs {k} entries, got shape {arr.shape}")
    if np.any(arr < 0):
        raise ParameterError(f"{name} must be non-negative")
    return arr


def train_ensemble(
    data: SyntheticDataset,
    plan: SubsamplingPlan,
    lam: float | Sequence[float],
    eta: float | Sequence[float],
    seed: int,
    *,
    stream: Sequence[int] = (),
) -> TrainedEnsemble:
    """Train every readout; readout r draws its noise from ("train-noise", *stream, r)."""
    if plan.dimension != data.M:
        raise ParameterError(f"plan is over M={plan.dimension} features but the data has M={data.M}")
    lam_v = _per_readout(lam, plan.k, "lam")
    eta_v = _per_readout(eta, plan.k, "eta")
    weights = []
    for r, mask in enumerate(plan.masks):
        rng = derive_rng(seed, "train-noise", *stream, r)
        w = train_readout(data, mask, float(lam_v[r]), float(eta_v[r]), rng)
        w.setflags(write=False)
        weights.append(w)
    return TrainedEnsemble(
        weights=tuple(weights), plan=plan, lam=lam_v, eta=eta_v, seed=seed, stream=tuple(stream)
    )


# ==================== Evaluation ====================


def exact_generalization_error(
    ensemble: TrainedEnsemble,
    cov: CovarianceSpec,
    truth: GroundTruth,
    eta: Optional[float | Sequence[float]] = None,
) -> ErrorMatrix:
    """Test-distribution expectation of every pairwise error, evaluated in closed form."""
    M = cov.dimension
    if ensemble.plan.dimension != M or truth.dimension != M:
        raise ParameterError("ensemble, covariance and ground truth disagree on M")
    eta_v = ensemble.eta if eta is None else _per_readout(eta, ensemble.k, "eta")
    V = ensemble.readout_directions()
    D = truth.weights[:, None] / math.sqrt(M) - V
    E = D.T @ cov.apply_signal(D) + V.T @ cov.apply_noise(V)
    E = 0.5 * (E + E.T)
    E[np.diag_indices_from(E)] += eta_v * eta_v
    return ErrorMatrix.from_pairwise(E)


def empirical_test_error(
    ensemble: TrainedEnsemble,
    cov: CovarianceSpec,
    truth: GroundTruth,
    n_test: int,
    seed: int,
) -> tuple[float, float]:
    """
    Sampled estimate of the ensemble error: mean squared deviation of the averaged
    noisy readout outputs from the clean target over ``n_test`` fresh examples.

    Returns:
        (mean, standard error)
    """
    if n_test < 2:
        raise ParameterError("an empirical estimate needs at least two test examples")
    V = ensemble.readout_directions()
    v_star = truth.weights / math.sqrt(cov.dimension)
    losses = np.empty(n_test)
    for block, start in enumerate(range(0, n_test, TEST_BLOCK)):
        n = min(TEST_BLOCK, n_test - start)
        rng = derive_rng(seed, "test", block)
        clean, noisy = _draw_features(cov, n, rng)
        outputs = noisy @ V + rng.standard_normal((n, ensemble.k)) * ensemble.eta
        losses[start : start + n] = (outputs.mean(axis=1) - clean @ v_star) ** 2
    return float(losses.mean()), float(losses.std(ddof=1) / math.sqrt(n_test))


# ==================== Trials ====================


@dataclass(frozen=True, eq=False)
class TrialExperiment:
    """
    One learning-curve simulation. ``plan_factory`` (trial seed -> plan), when set,
    redraws the plan every trial; otherwise ``plan`` is reused.
    """

    cov: CovarianceSpec
    truth: GroundTruth
    alphas: tuple[float, ...]
    zeta: float
    eta: np.ndarray
    lam: np.ndarray
    plan: Optional[SubsamplingPlan] = None
    plan_factory: Optional[Callable[[int], SubsamplingPlan]] = None

    def __post_init__(self) -> None:
        if self.plan is None and self.plan_factory is None:
            raise ParameterError("a trial experiment needs a plan or a plan factory")
        if len(self.alphas) == 0 or any(not a > 0 or math.isinf(a) for a in self.alphas):
            raise ParameterError("alphas must be positive and finite")

    def train_size(self, alpha: float) -> int:
        return max(1, int(round(alpha * self.cov.dimension)))


@dataclass(frozen=True, eq=False)
class TrialSummary:
    alpha: float
    P: int
    n_trials: int
    mean: float
    sem: float
    pairwise_mean: np.ndarray
    pairwise_sem: np.ndarray
    trial_errors: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def diverged(self) -> bool:
        return not math.isfinite(self.mean)

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "P": self.P,
            "n_trials": self.n_trials,
            "mean": self.mean,
            "sem": self.sem,
            "pairwise_mean": self.pairwise_mean.tolist(),
            "pairwise_sem": self.pairwise_sem.tolist(),
        }


def _sem(values: np.ndarray, axis: int = 0) -> np.ndarray:
    n = values.shape[axis]
    if n < 2:
        return np.full(values.shape[1:], math.nan) if values.ndim > 1 else np.asarray(math.nan)
    with np.errstate(invalid="ignore"):
        return np.std(values, axis=axis, ddof=1) / math.sqrt(n)


def run_trials(
    experiment: TrialExperiment,
    n_trials: int,
    master_seed: int,
    *,
    cell: int = 0,
    trial_indices: Optional[Sequence[int]] = None,
) -> list[TrialSummary]:
    """
    Mean and SEM of the exact ensemble error per alpha over ``n_trials`` trials.

    Trial t draws its data from ("data", cell + alpha_index, t) and its training
    noise from ("train-noise", cell + alpha_index, t, r). ``trial_indices``
    replaces the trial numbers (repeating an index repeats the trial).
    """
    if n_trials < 1:
        raise ParameterError(f"n_trials must be positive, got {n_trials}")
    indices = list(range(n_trials)) if trial_indices is None else [int(t) for t in trial_indices]
    if len(indices) != n_trials:
        raise ParameterError(f"expected {n_trials} trial indices, got {len(indices)}")

    summaries: list[TrialSummary] = []
    for a_idx, alpha in enumerate(experiment.alphas):
        P = experiment.train_size(alpha)
        stream_cell = cell + a_idx
        pairwise: list[np.ndarray] = []
        for t in indices:
            plan = experiment.plan
            if experiment.plan_factory is not None:
                plan = experiment.plan_factory(derive_seed(master_seed, "plan", t))
            assert plan is not None
            data = generate_dataset(
                experiment.cov, experiment.truth, experiment.zeta, P, master_seed, stream=(stream_cell, t)
            )
            trained = train_ensemble(
                data, plan, experiment.lam, experiment.eta, master_seed, stream=(stream_cell, t)
            )
            pairwise.append(exact_generalization_error(trained, experiment.cov, experiment.truth).pairwise)

        stack = np.stack(pairwise)
        per_trial = np.array([np.mean(E) for E in stack])
        mean = float(np.mean(per_trial))
        sem = float(_sem(per_trial))
        summaries.append(
            TrialSummary(
                alpha=float(alpha),
                P=P,
                n_trials=n_trials,
                mean=mean,
                sem=sem,
                pairwise_mean=np.mean(stack, axis=0),
                pairwise_sem=_sem(stack),
                trial_errors=per_trial,
            )
        )
        if not math.isfinite(mean) or mean > 1e12:
            log.warning("trials.near_threshold", alpha=alpha, P=P, mean=mean)
    log.debug("trials.done", n_alpha=len(experiment.alphas), n_trials=n_trials, seed=master_seed)
    return summaries
