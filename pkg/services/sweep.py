"""
services/sweep.py

Grid sweeps: learning curves, k* phase diagrams and classifier curves.

Every grid is the product of its axes. Cells are independent tasks run on a
thread pool; results land in pre-indexed slots, so output never depends on
scheduling or thread count. A cell that raises is recorded with its error
string (per config/error_policies.yml) and the sweep continues.
"""

from __future__ import annotations

from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import functools
import itertools
import math
import threading
from typing import Any, Optional, Union

from blinker import Signal
import numpy as np

from config import settings
from core.covariance import (
    CovarianceSpec,
    GroundTruth,
    PlanStrategy,
    SpikedTruthPrior,
    SubsamplingPlan,
    TruthScheme,
    sample_ground_truth,
)
from core.error_policy import handle_cell_error
from core.seeding import derive_rng, derive_seed
from core.theory_equicorr import (
    EquiTask,
    ReducedPoint,
    asymptotic_reduced_error,
    ensemble_error_equicorr,
    noise_dominated_boundary,
    optimal_k,
    optimal_reduced_regularization,
    reduced_error,
)
from core.theory_general import ErrorMatrix, ResolventBasis, general_error_matrix
from services.classifier import (
    FeatureDataset,
    classification_error,
    load_feature_dataset,
    synthetic_blob_dataset,
    train_classifier_ensemble,
)
from services.schemas import (
    AxisConfig,
    ClassifyConfig,
    EnsembleConfig,
    LearningCurveConfig,
    PhaseConfig,
    config_hash,
)
from services.simulator import TrialExperiment, run_trials
from utils.logger import get_logger


log = get_logger(__name__)

# sender: sweep kind; kwargs: index, total, failed
cell_finished = Signal("cell-finished")

DRAW_MEAN = -1.0
THRESHOLD_SHIFT = 1e-9
THRESHOLD_TOL = 1e-12


# ==================== Grid ====================


@dataclass(frozen=True)
class GridAxis:
    name: str
    values: tuple[float, ...]
    scale: str = "linear"

    @classmethod
    def from_config(cls, axis: AxisConfig) -> GridAxis:
        return cls(name=axis.name, values=tuple(axis.resolved()), scale=axis.scale)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "scale": self.scale, "values": list(self.values)}


@dataclass
class GridCell:
    index: tuple[int, ...]
    coords: dict[str, float]
    values: dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class SweepGrid:
    """Axes, one cell per axis combination (row-major, last axis fastest), and provenance."""

    kind: str
    axes: list[GridAxis]
    cells: list[GridCell]
    columns: list[str] = field(default_factory=list)
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a.values) for a in self.axes)

    @property
    def n_failed(self) -> int:
        return sum(1 for c in self.cells if c.failed)

    def cell(self, *index: int) -> GridCell:
        return self.cells[int(np.ravel_multi_index(index, self.shape))]

    def column(self, name: str) -> np.ndarray:
        """Values of one column reshaped to the grid; failed or missing entries are nan."""
        flat = np.array([c.values.get(name, math.nan) for c in self.cells], dtype=np.float64)
        return flat.reshape(self.shape)

    def finalize_columns(self) -> None:
        seen: dict[str, None] = {}
        for c in self.cells:
            for name in c.values:
                seen.setdefault(name, None)
        self.columns = list(seen)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "provenance": self.provenance,
            "axes": [a.to_dict() for a in self.axes],
            "columns": self.columns,
            "cells": [
                {"index": list(c.index), "values": [c.values.get(k, math.nan) for k in self.columns], "error": c.error}
                for c in self.cells
            ],
        }


def empty_grid(kind: str, axes: list[GridAxis], provenance: dict[str, Any]) -> SweepGrid:
    cells = []
    for index in itertools.product(*(range(len(a.values)) for a in axes)):
        coords = {a.name: a.values[i] for a, i in zip(axes, index)}
        cells.append(GridCell(index=tuple(index), coords=coords))
    return SweepGrid(kind=kind, axes=axes, cells=cells, provenance=provenance)


def _provenance(kind: str, config: Any, seed: int) -> dict[str, Any]:
    return {
        "kind": kind,
        "config_hash": config_hash(config, seed),
        "seed": seed,
        "artifact_version": settings.ARTIFACT_VERSION,
    }


# ==================== Execution ====================


CellTask = Callable[[], dict[str, float]]


def run_cells(
    kind: str,
    grid: SweepGrid,
    tasks: Sequence[Optional[CellTask]],
    threads: Optional[int] = None,
) -> SweepGrid:
    """Run one task per cell (None skips the cell); fills values or error strings in place."""
    threads = max(1, threads or settings.DEFAULT_THREADS)
    total = len(tasks)

    def _run(i: int) -> None:
        task = tasks[i]
        if task is None:
            return
        cell = grid.cells[i]
        try:
            cell.values = task()
        except Exception as exc:
            cell.error = handle_cell_error(exc, sweep=kind, cell=i, coords=cell.coords)
        cell_finished.send(kind, index=i, total=total, failed=cell.failed)

    if threads == 1:
        for i in range(total):
            _run(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_run, i) for i in range(total)]
            try:
                for f in futures:
                    f.result()
            except BaseException:
                for f in futures:
                    f.cancel()
                raise
    log.info("sweep.done", kind=kind, cells=total, failed=grid.n_failed, threads=threads)
    return grid


# ==================== Learning curves ====================


@dataclass(frozen=True)
class _CurveSetting:
    """Values of the extra axes for one curve."""

    ensemble: EnsembleConfig
    lam: Union[float, list[float]]
    eta: Union[float, list[float]]
    zeta: float
    rho: float


def _curve_setting(config: LearningCurveConfig, coords: dict[str, float]) -> _CurveSetting:
    ensemble = config.ensemble
    if "k" in coords:
        ensemble = ensemble.model_copy(update={"k": int(coords["k"])})
    if "nu" in coords:
        ensemble = ensemble.model_copy(update={"k": 1, "fractions": [coords["nu"]]})
    return _CurveSetting(
        ensemble=ensemble,
        lam=coords.get("lam", config.lam),
        eta=coords.get("eta", config.eta),
        zeta=coords.get("zeta", config.zeta),
        rho=coords.get("rho", config.truth.rho),
    )


class _Memo:
    """Thread-safe lazily built values shared between cells (plans, truths, bases)."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._values: dict[Any, Any] = {}

    def get(self, key: Any, build: Callable[[], Any]) -> Any:
        with self._lock:
            if key in self._values:
                return self._values[key]
        value = build()
        with self._lock:
            return self._values.setdefault(key, value)


def _pairwise_columns(prefix: str, errors: ErrorMatrix) -> dict[str, float]:
    out = {}
    for r in range(errors.k):
        for rp in range(r, errors.k):
            out[f"{prefix}{r}_{rp}"] = float(errors.pairwise[r, rp])
    return out


def _equicorr_theory(
    config: LearningCurveConfig, setting: _CurveSetting, plan: SubsamplingPlan, alpha: float
) -> tuple[ErrorMatrix, dict[str, float]]:
    cov = config.covariance
    task = EquiTask.from_plan(
        plan,
        s=cov.s,
        c=cov.c,
        omega2=cov.omega2,
        zeta=setting.zeta,
        rho=setting.rho,
        eta=setting.eta,
        lam=setting.lam,
        alpha=alpha,
        use_raw_fractions=True,
    )
    order: dict[str, float] = {}
    for r in range(task.k):
        params = task.readout_order(r)
        order[f"q_{r}"] = params.q
        order[f"q_hat_{r}"] = params.q_hat
    return ensemble_error_equicorr(task), order


def learning_curve_sweep(
    config: LearningCurveConfig,
    *,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    full_matrix: bool = False,
    dump_order_params: bool = False,
) -> SweepGrid:
    """
    Theory and/or simulated ensemble error over alpha and any extra axes.

    Heterogeneous ensembles with several plan draws get a ``draw`` axis whose
    value -1 holds the mean over draws.
    """
    seed = config.seed if seed is None else seed
    axes = [GridAxis.from_config(a) for a in config.axes]
    n_draws = config.ensemble.n_plan_draws
    if n_draws > 1:
        axes.append(GridAxis("draw", (DRAW_MEAN, *(float(d) for d in range(n_draws)))))
    axes.append(GridAxis.from_config(config.alpha))
    grid = empty_grid("curve", axes, _provenance("curve", config, seed))

    M = config.covariance.M
    cov: CovarianceSpec = config.covariance.build()
    memo = _Memo()

    def plan_for(setting: _CurveSetting, draw: int) -> SubsamplingPlan:
        key = ("plan", setting.ensemble.model_dump_json(), draw)
        return memo.get(key, lambda: setting.ensemble.build_plan(M, derive_seed(seed, "plan", draw)))

    def truth_for(rho: float) -> GroundTruth:
        return memo.get(("truth", rho), lambda: sample_ground_truth(rho, M, seed, config.truth.scheme))

    def basis_for(setting: _CurveSetting, draw: int) -> ResolventBasis:
        key = ("basis", setting.ensemble.model_dump_json(), draw)
        return memo.get(key, lambda: ResolventBasis(cov, plan_for(setting, draw)))

    def make_task(cell: GridCell, flat: int) -> Optional[CellTask]:
        draw = int(cell.coords.get("draw", 0.0))
        if draw == DRAW_MEAN:
            return None
        alpha = cell.coords["alpha"]
        setting = _curve_setting(config, cell.coords)

        def task() -> dict[str, float]:
            plan = plan_for(setting, draw)
            out: dict[str, float] = {"P": float(max(1, round(alpha * M)))}
            if config.theory == "equicorr":
                errors, order = _equicorr_theory(config, setting, plan, alpha)
            elif config.theory == "general":
                if config.truth.averaged and config.truth.scheme is TruthScheme.SPIKED:
                    truth: Union[GroundTruth, SpikedTruthPrior] = SpikedTruthPrior(setting.rho)
                else:
                    truth = truth_for(setting.rho)
                params, errors = general_error_matrix(
                    cov, plan, truth, setting.lam, alpha, setting.zeta, setting.eta, basis=basis_for(setting, draw)
                )
                order = {f"q_{r}": float(params.q[r]) for r in range(params.k)}
                order.update({f"q_hat_{r}": float(params.q_hat[r]) for r in range(params.k)})
            else:
                errors, order = None, {}
            if errors is not None:
                out["E_g"] = errors.ensemble
                if full_matrix:
                    out.update(_pairwise_columns("E_", errors))
                if dump_order_params:
                    out.update(order)

            if config.simulation is not None:
                factory = None
                if setting.ensemble.redraw_masks:
                    factory = functools.partial(setting.ensemble.build_plan, M)
                experiment = TrialExperiment(
                    cov=cov,
                    truth=truth_for(setting.rho),
                    alphas=(alpha,),
                    zeta=setting.zeta,
                    eta=np.broadcast_to(np.asarray(setting.eta, dtype=np.float64), (plan.k,)).copy(),
                    lam=np.broadcast_to(np.asarray(setting.lam, dtype=np.float64), (plan.k,)).copy(),
                    plan=plan,
                    plan_factory=factory,
                )
                (summary,) = run_trials(experiment, config.simulation.n_trials, seed, cell=flat)
                out["sim_mean"] = summary.mean
                out["sim_sem"] = summary.sem
                if full_matrix:
                    for r in range(plan.k):
                        for rp in range(r, plan.k):
                            out[f"sim_E_{r}_{rp}"] = float(summary.pairwise_mean[r, rp])
            return out

        return task

    tasks = [make_task(c, i) for i, c in enumerate(grid.cells)]
    run_cells("curve", grid, tasks, threads)
    if n_draws > 1:
        _fill_draw_means(grid)
    grid.finalize_columns()
    return grid


def _fill_draw_means(grid: SweepGrid) -> None:
    """Cells at draw = -1 average the successful draws of the same coordinates."""
    draw_axis = next(i for i, a in enumerate(grid.axes) if a.name == "draw")
    groups: dict[tuple[int, ...], list[GridCell]] = {}
    for cell in grid.cells:
        key = cell.index[:draw_axis] + cell.index[draw_axis + 1 :]
        groups.setdefault(key, []).append(cell)
    for cells in groups.values():
        target = next(c for c in cells if c.coords["draw"] == DRAW_MEAN)
        done = [c for c in cells if c is not target and not c.failed]
        if not done:
            target.error = "all plan draws failed"
            continue
        names = list(dict.fromkeys(name for c in done for name in c.values))
        target.values = {
            name: float(np.mean([c.values.get(name, math.nan) for c in done])) for name in names
        }


def theory_point_sweep(
    config: LearningCurveConfig, *, seed: Optional[int] = None, dump_order_params: bool = False
) -> SweepGrid:
    """Theory at the first alpha only, with the full pairwise matrix."""
    first = config.alpha.resolved()[0]
    point = config.model_copy(
        update={
            "alpha": AxisConfig(name="alpha", values=[first]),
            "axes": [],
            "simulation": None,
            "ensemble": config.ensemble.model_copy(update={"n_plan_draws": 1}),
        }
    )
    return learning_curve_sweep(point, seed=seed, threads=1, full_matrix=True, dump_order_params=dump_order_params)


# ==================== Phase diagrams ====================


def _phase_axes(config: PhaseConfig) -> list[GridAxis]:
    axes = []
    for axis in (config.x, config.y):
        g = GridAxis.from_config(axis)
        if axis.name == "alpha" and config.append_alpha_infinity:
            g = GridAxis(g.name, (*g.values, math.inf), g.scale)
        axes.append(g)
    return axes


def _shift_off_threshold(alpha: float, k_max: int) -> float:
    """Move alpha by 1e-9 when it sits on a ridgeless threshold 1/k."""
    if math.isinf(alpha):
        return alpha
    k = round(1.0 / alpha)
    if 1 <= k <= k_max and abs(alpha - 1.0 / k) < THRESHOLD_TOL:
        return alpha + THRESHOLD_SHIFT
    return alpha


def phase_cell(config: PhaseConfig, coords: dict[str, float]) -> dict[str, float]:
    params = {name: coords.get(name, getattr(config, name)) for name in ("alpha", "H", "W", "Z", "rho")}
    alpha = params["alpha"]
    if config.mode.value == "ridgeless":
        alpha = _shift_off_threshold(alpha, config.k_max)
    best = optimal_k(params["H"], params["W"], params["Z"], params["rho"], alpha, config.mode, config.k_max)
    out = {
        "k_star": float(best.k),
        "E_k_star": best.error,
        "E_inf": asymptotic_reduced_error(params["rho"], params["W"]),
        "E_k1": reduced_error(
            ReducedPoint(k=1, alpha=alpha, rho=params["rho"], H=params["H"], W=params["W"], Z=params["Z"]),
            config.mode,
        ),
        "alpha_shift": alpha - params["alpha"] if math.isfinite(alpha) else 0.0,
    }
    if config.mode.value == "ridgeless":
        boundary = noise_dominated_boundary(params["rho"], params["H"], params["W"])
        out["boundary_alpha"] = math.inf if boundary is None else boundary
    else:
        out["Lambda_star"] = optimal_reduced_regularization(
            best.k, params["rho"], params["H"], params["W"], params["Z"]
        )
    return out


def phase_diagram_sweep(
    config: PhaseConfig, *, seed: Optional[int] = None, threads: Optional[int] = None
) -> SweepGrid:
    """k*, E(k*) and the analytic noise-dominated boundary per (x, y) cell, in reduced units."""
    seed = config.seed if seed is None else seed
    grid = empty_grid("phase", _phase_axes(config), _provenance("phase", config, seed))
    tasks = [(lambda coords=c.coords: phase_cell(config, coords)) for c in grid.cells]
    run_cells("phase", grid, tasks, threads)
    grid.finalize_columns()
    return grid


# ==================== Classifier curves ====================


def _classifier_data(config: ClassifyConfig, seed: int) -> tuple[FeatureDataset, FeatureDataset]:
    if config.synthetic is not None:
        b = config.synthetic
        kw = {"separation": b.separation, "within_scale": b.within_scale}
        train = synthetic_blob_dataset(b.M, b.C, b.n_train, seed, split="train", **kw)
        test = synthetic_blob_dataset(b.M, b.C, b.n_test, seed, split="test", **kw)
        return train, test
    assert config.files is not None
    f = config.files
    train = load_feature_dataset(f.train_path, f.format, label_column=f.label_column, center=f.center)
    test = load_feature_dataset(
        f.test_path, f.format, label_column=f.label_column, n_classes=train.n_classes, center=f.center, split="test"
    )
    if test.M != train.M:
        raise ValueError(f"train has M={train.M} features but test has M={test.M}")
    return train, test


def _trial_rows(n_available: int, P: int, seed: int, cell: int, trial: int) -> np.ndarray:
    if P > n_available:
        raise ValueError(f"train size P={P} exceeds the {n_available} available training examples")
    return derive_rng(seed, "class-subset", cell, trial).permutation(n_available)[:P]


def classify_sweep(
    config: ClassifyConfig, *, seed: Optional[int] = None, threads: Optional[int] = None
) -> SweepGrid:
    """Majority-vote test error versus training-set size, averaged over trials."""
    seed = config.seed if seed is None else seed
    axes = [GridAxis("P", tuple(float(p) for p in config.train_sizes.resolved()), config.train_sizes.scale)]
    grid = empty_grid("classify", axes, _provenance("classify", config, seed))
    train, test = _classifier_data(config, seed)
    memo = _Memo()

    def plan_for(trial: int) -> SubsamplingPlan:
        draw = trial if config.ensemble.redraw_masks or config.ensemble.strategy is PlanStrategy.HETEROGENEOUS else 0
        return memo.get(draw, lambda: config.ensemble.build_plan(train.M, derive_seed(seed, "plan", draw)))

    def make_task(cell: GridCell, flat: int) -> CellTask:
        P = int(cell.coords["P"])

        def task() -> dict[str, float]:
            errors = []
            for t in range(config.n_trials):
                rows = _trial_rows(train.n, P, seed, flat, t)
                trained = train_classifier_ensemble(
                    train.subset(rows), plan_for(t), config.lam, config.eta, seed, stream=(flat, t)
                )
                errors.append(classification_error(trained, test, derive_seed(config.eval_seed, "class-eval", flat, t)))
            arr = np.asarray(errors)
            sem = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else math.nan
            return {"error_mean": float(arr.mean()), "error_sem": sem}

        return task

    run_cells("classify", grid, [make_task(c, i) for i, c in enumerate(grid.cells)], threads)
    grid.finalize_columns()
    return grid


def iter_failed(grid: SweepGrid) -> Iterator[GridCell]:
    return (c for c in grid.cells if c.failed)
