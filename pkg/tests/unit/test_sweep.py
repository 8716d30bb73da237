"""
tests/unit/test_sweep.py

Learning-curve, phase-diagram and classifier sweeps on small grids.
"""
import math

import numpy as np
import pytest

from core.errors import ConfigValidationError
from core.seeding import derive_seed
from core.theory_equicorr import EquiTask, ensemble_error_equicorr
from services.grid_io import dumps_grid
from services.schemas import parse_config
from services.sweep import (
    DRAW_MEAN,
    GridAxis,
    cell_finished,
    classify_sweep,
    empty_grid,
    iter_failed,
    learning_curve_sweep,
    phase_cell,
    phase_diagram_sweep,
    run_cells,
    theory_point_sweep,
)


# ==================== Grid basics ====================


def test_empty_grid_is_row_major():
    grid = empty_grid("curve", [GridAxis("lam", (0.1, 0.2)), GridAxis("alpha", (1.0, 2.0, 3.0))], {})
    assert grid.shape == (2, 3)
    assert grid.cells[1].coords == {"lam": 0.1, "alpha": 2.0}
    assert grid.cell(1, 0).coords == {"lam": 0.2, "alpha": 1.0}


def test_run_cells_records_failures_and_signals():
    grid = empty_grid("phase", [GridAxis("alpha", (1.0, 2.0, 3.0))], {})
    seen = []

    def receiver(sender, **kw):
        seen.append((sender, kw["index"], kw["failed"]))

    def boom():
        raise ZeroDivisionError("division by zero")

    cell_finished.connect(receiver)
    try:
        run_cells("phase", grid, [lambda: {"x": 1.0}, boom, None], threads=1)
    finally:
        cell_finished.disconnect(receiver)
    assert seen == [("phase", 0, False), ("phase", 1, True)]
    assert grid.cells[0].values == {"x": 1.0}
    assert grid.cells[1].error.startswith("ZeroDivisionError")
    assert grid.cells[2].values == {} and not grid.cells[2].failed
    assert [c.index for c in iter_failed(grid)] == [(1,)]


def test_run_cells_abort_policy_propagates():
    grid = empty_grid("curve", [GridAxis("alpha", (1.0, 2.0))], {})

    def invalid():
        raise ConfigValidationError([("$.x", "bad")])

    with pytest.raises(ConfigValidationError):
        run_cells("curve", grid, [invalid, lambda: {"x": 1.0}], threads=2)


# ==================== Learning curves ====================


def test_equicorr_curve_matches_closed_form(small_curve_doc):
    config = parse_config(small_curve_doc)
    grid = learning_curve_sweep(config)
    assert grid.shape == (3,)
    assert grid.column("P").tolist() == [30.0, 90.0, 180.0]
    for cell in grid.cells:
        task = EquiTask.exclusive(
            [1 / 3] * 3, s=1.0, c=0.5, omega2=0.1, zeta=0.1, rho=0.3, eta=0.1, lam=0.05, alpha=cell.coords["alpha"]
        )
        assert cell.values["E_g"] == pytest.approx(ensemble_error_equicorr(task).ensemble, rel=1e-12)
    assert grid.provenance["seed"] == 5
    assert len(grid.provenance["config_hash"]) == 64


def test_curve_independent_of_thread_count(small_curve_doc):
    doc = {**small_curve_doc, "simulation": {"n_trials": 2}}
    config = parse_config(doc)
    serial = learning_curve_sweep(config, threads=1, full_matrix=True)
    pooled = learning_curve_sweep(config, threads=3, full_matrix=True)
    assert dumps_grid(serial) == dumps_grid(pooled)
    assert {"sim_mean", "sim_sem", "sim_E_0_2"} <= set(serial.columns)


def test_seed_override_changes_simulation(small_curve_doc):
    config = parse_config({**small_curve_doc, "theory": "none", "simulation": {"n_trials": 2}})
    a = learning_curve_sweep(config, seed=1)
    b = learning_curve_sweep(config, seed=2)
    assert a.provenance["seed"] == 1
    assert a.column("sim_mean").tolist() != b.column("sim_mean").tolist()
    assert "E_g" not in a.columns


def test_order_parameter_columns(small_curve_doc):
    grid = learning_curve_sweep(parse_config(small_curve_doc), dump_order_params=True, full_matrix=True)
    assert {"q_0", "q_hat_2", "E_0_0", "E_1_2"} <= set(grid.columns)
    assert "E_1_0" not in grid.columns


def test_general_backend_records_failures(small_curve_doc):
    """lam = 0 is outside the general solver's range, so every cell fails"""
    config = parse_config({**small_curve_doc, "theory": "general", "lam": 0.0})
    grid = learning_curve_sweep(config)
    assert grid.n_failed == 3
    assert all(c.error.startswith("ParameterError") for c in grid.cells)


def test_general_backend_curve(small_curve_doc):
    config = parse_config({**small_curve_doc, "theory": "general"})
    grid = learning_curve_sweep(config, dump_order_params=True)
    assert grid.n_failed == 0
    values = grid.column("E_g")
    assert np.all(np.isfinite(values))
    # more data helps at this ridge
    assert values[0] > values[-1]


def test_heterogeneous_draw_axis(small_curve_doc):
    doc = {**small_curve_doc, "ensemble": {"strategy": "heterogeneous", "k": 3, "sigma": 0.1, "n_plan_draws": 3}}
    grid = learning_curve_sweep(parse_config(doc))
    assert [a.name for a in grid.axes] == ["draw", "alpha"]
    assert grid.axes[0].values == (DRAW_MEAN, 0.0, 1.0, 2.0)
    E = grid.column("E_g")
    np.testing.assert_allclose(E[0], E[1:].mean(axis=0), rtol=1e-13)


def test_draws_use_their_own_plans(small_curve_doc):
    doc = {**small_curve_doc, "ensemble": {"strategy": "heterogeneous", "k": 3, "sigma": 0.1, "n_plan_draws": 2}}
    config = parse_config(doc)
    grid = learning_curve_sweep(config)
    plan = config.ensemble.build_plan(60, derive_seed(config.seed, "plan", 1))
    task = EquiTask.from_plan(
        plan, s=1.0, c=0.5, omega2=0.1, zeta=0.1, rho=0.3, eta=0.1, lam=0.05, alpha=0.5, use_raw_fractions=True
    )
    assert grid.cell(2, 0).values["E_g"] == pytest.approx(ensemble_error_equicorr(task).ensemble, rel=1e-12)


def test_k_axis(small_curve_doc):
    doc = {**small_curve_doc, "axes": [{"name": "k", "values": [1, 2, 4]}]}
    grid = learning_curve_sweep(parse_config(doc), full_matrix=True)
    assert grid.shape == (3, 3)
    assert "E_3_3" in grid.columns
    assert "E_3_3" not in grid.cell(0, 0).values


def test_nu_axis_sweeps_single_readout(small_curve_doc):
    doc = {**small_curve_doc, "ensemble": {"k": 1}, "axes": [{"name": "nu", "values": [0.25, 0.5]}]}
    grid = learning_curve_sweep(parse_config(doc))
    task = EquiTask.exclusive(
        [0.25], s=1.0, c=0.5, omega2=0.1, zeta=0.1, rho=0.3, eta=0.1, lam=0.05, alpha=1.5
    )
    assert grid.cell(0, 1).values["E_g"] == pytest.approx(ensemble_error_equicorr(task).ensemble, rel=1e-12)


def test_theory_point(small_curve_doc):
    grid = theory_point_sweep(parse_config({**small_curve_doc, "simulation": {"n_trials": 5}}))
    assert grid.shape == (1,)
    assert grid.cells[0].coords["alpha"] == 0.5
    assert "E_0_1" in grid.columns and "sim_mean" not in grid.columns


# ==================== Phase diagrams ====================


def test_phase_grid(small_phase_doc):
    grid = phase_diagram_sweep(parse_config(small_phase_doc))
    assert grid.shape == (4, 2)
    assert grid.axes[0].values[-1] == math.inf
    boundary = grid.column("boundary_alpha")
    np.testing.assert_allclose(boundary[:, 0], 1.0 / 6.0)
    np.testing.assert_allclose(boundary[:, 1], 0.25)
    shifts = grid.column("alpha_shift")[:, 0]
    assert shifts[0] == pytest.approx(1e-9, rel=1e-6)
    assert shifts[1] == pytest.approx(1e-9, rel=1e-6)
    assert shifts[2] == 0.0 and shifts[3] == 0.0
    assert np.all(grid.column("E_k_star") <= grid.column("E_k1"))


def test_phase_cell_noise_dominated():
    config = parse_config(
        {"kind": "phase", "x": {"name": "alpha", "values": [2.0]}, "y": {"name": "H", "values": [3.0]}}
    )
    out = phase_cell(config, {"alpha": 2.0, "H": 3.0})
    assert out["k_star"] == math.inf
    assert out["boundary_alpha"] == math.inf
    assert out["E_k_star"] == out["E_inf"] == 1.0


def test_locally_optimal_phase_columns(small_phase_doc):
    doc = {**small_phase_doc, "reg_mode": "locally_optimal", "append_alpha_infinity": False}
    grid = phase_diagram_sweep(parse_config(doc), threads=2)
    assert "Lambda_star" in grid.columns and "boundary_alpha" not in grid.columns
    assert np.all(grid.column("alpha_shift") == 0.0)


# ==================== Classifier curves ====================


def test_classify_sweep(small_classify_doc):
    grid = classify_sweep(parse_config(small_classify_doc))
    assert grid.shape == (2,)
    errors = grid.column("error_mean")
    assert np.all((errors >= 0.0) & (errors <= 1.0))
    assert np.all(np.isfinite(grid.column("error_sem")))


def test_classify_sweep_reproducible(small_classify_doc):
    config = parse_config(small_classify_doc)
    assert dumps_grid(classify_sweep(config, threads=1)) == dumps_grid(classify_sweep(config, threads=2))


def test_classify_train_size_beyond_data(small_classify_doc):
    grid = classify_sweep(parse_config({**small_classify_doc, "train_sizes": [20, 500]}))
    assert not grid.cells[0].failed
    assert grid.cells[1].failed and "500" in grid.cells[1].error
