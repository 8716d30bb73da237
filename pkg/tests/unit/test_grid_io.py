"""
tests/unit/test_grid_io.py

Grid emission: CSV and JSON reload without loss, malformed inputs rejected.
"""
from pathlib import Path

import orjson
import pytest

from core.errors import DatasetFormatError
from services.grid_io import dumps_grid, emit, load_grid, loads_grid
from services.schemas import parse_config
from services.sweep import learning_curve_sweep, phase_diagram_sweep


@pytest.fixture
def phase_grid(small_phase_doc):
    """Holds inf both on the alpha axis and in boundary/k* columns"""
    return phase_diagram_sweep(parse_config({**small_phase_doc, "y": {"name": "H", "values": [0.0, 3.0]}}))


@pytest.fixture
def ragged_grid(small_curve_doc):
    """Different k per row, so some cells lack the larger pairwise columns"""
    doc = {**small_curve_doc, "axes": [{"name": "k", "values": [1, 2]}]}
    return learning_curve_sweep(parse_config(doc), full_matrix=True)


@pytest.fixture
def failed_grid(small_curve_doc):
    return learning_curve_sweep(parse_config({**small_curve_doc, "theory": "general", "lam": 0.0}))


@pytest.mark.parametrize("fmt", ["csv", "json"])
@pytest.mark.parametrize("which", ["phase_grid", "ragged_grid", "failed_grid"])
def test_reload_is_lossless(fmt, which, request):
    grid = request.getfixturevalue(which)
    raw = dumps_grid(grid, fmt)
    again = loads_grid(raw, fmt)
    assert dumps_grid(again, fmt) == raw
    assert again.shape == grid.shape
    assert again.columns == grid.columns
    assert [c.error for c in again.cells] == [c.error for c in grid.cells]


def test_csv_layout(phase_grid):
    text = dumps_grid(phase_grid, "csv").decode("utf-8").splitlines()
    header = orjson.loads(text[0][2:])
    assert header["kind"] == "phase"
    assert header["axes"][0]["values"][-1] == "inf"
    assert text[1].split(",")[:2] == ["alpha", "H"]
    assert text[1].endswith(",error")
    assert len(text) == 2 + len(phase_grid.cells)


def test_json_non_finite_strings(phase_grid):
    doc = orjson.loads(dumps_grid(phase_grid, "json"))
    assert "inf" in doc["axes"][0]["values"]
    assert doc["provenance"]["config_hash"] == phase_grid.provenance["config_hash"]


def test_absent_values_are_empty_fields(ragged_grid):
    lines = dumps_grid(ragged_grid, "csv").decode("utf-8").splitlines()
    header = lines[1].split(",")
    first = lines[2].split(",")
    assert first[header.index("E_1_1")] == ""
    doc = orjson.loads(dumps_grid(ragged_grid, "json"))
    idx = doc["columns"].index("E_1_1")
    assert doc["cells"][0]["values"][idx] is None


def test_emit_and_load_by_suffix(tmp_path: Path, phase_grid):
    csv_path = emit(phase_grid, "csv", tmp_path / "out" / "phase.csv")
    json_path = emit(phase_grid, "json", tmp_path / "phase.json")
    assert load_grid(csv_path).column("k_star").shape == phase_grid.shape
    assert dumps_grid(load_grid(json_path), "json") == json_path.read_bytes()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda lines: lines[1:],
        lambda lines: lines[:-1],
        lambda lines: [lines[0], lines[1].replace("k_star", "k_best")] + lines[2:],
        lambda lines: lines[:2] + lines[3:4] + lines[2:3] + lines[4:],
    ],
)
def test_malformed_csv_rejected(phase_grid, mutate):
    lines = dumps_grid(phase_grid, "csv").decode("utf-8").splitlines()
    raw = ("\n".join(mutate(lines)) + "\n").encode("utf-8")
    with pytest.raises(DatasetFormatError):
        loads_grid(raw, "csv")


def test_malformed_json_rejected(phase_grid):
    doc = orjson.loads(dumps_grid(phase_grid, "json"))
    doc["cells"] = doc["cells"][:-1]
    with pytest.raises(DatasetFormatError):
        loads_grid(orjson.dumps(doc), "json")
