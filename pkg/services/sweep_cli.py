#!/usr/bin/env python3
"""
services/sweep_cli.py

Command-line surface for ridgelab sweeps.

Usage:
    python -m services.sweep_cli theory   --config configs/equicorr_trials.json
    python -m services.sweep_cli curve    --config configs/heterogeneous_curve.json --out curve.csv
    python -m services.sweep_cli simulate --config configs/equicorr_trials.json --threads 4
    python -m services.sweep_cli phase    --config configs/phase_ridgeless.json --format json
    python -m services.sweep_cli classify --config configs/classify_blobs.yml
    python -m services.sweep_cli validate-config --config my_experiment.yml

Exit codes:
    0  success (individual cells may have failed; see the error column)
    1  invalid configuration or input file
    2  every cell failed numerically
"""

from __future__ import annotations

import argparse
from pathlib import Path
import sys
from typing import Any, Callable, Optional

from core.errors import ConfigValidationError, RidgeLabError
from services.grid_io import dumps_grid, emit
from services.schemas import ClassifyConfig, LearningCurveConfig, PhaseConfig, config_hash, load_config
from services.sweep import (
    SweepGrid,
    cell_finished,
    classify_sweep,
    iter_failed,
    learning_curve_sweep,
    phase_diagram_sweep,
    theory_point_sweep,
)
from utils.logger import get_logger, setup_debug_logging


log = get_logger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2

SUBCOMMANDS = ("theory", "simulate", "curve", "phase", "classify", "validate-config")
_EXPECTED_KIND = {
    "theory": LearningCurveConfig,
    "simulate": LearningCurveConfig,
    "curve": LearningCurveConfig,
    "phase": PhaseConfig,
    "classify": ClassifyConfig,
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", required=True, help="Experiment document (JSON or YAML)")
    common.add_argument("--out", "-o", default=None, help="Output path (default: stdout)")
    common.add_argument("--format", "-f", choices=["csv", "json"], default="csv", help="Output format (default: csv)")
    common.add_argument("--seed", type=int, default=None, help="Override the document's master seed")
    common.add_argument("--threads", type=int, default=None, help="Worker threads for grid cells")
    common.add_argument("--full-matrix", action="store_true", help="Emit every pairwise error E_rr'")
    common.add_argument("--dump-order-params", action="store_true", help="Emit q_r and q_hat_r per cell")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging on stderr")

    parser = argparse.ArgumentParser(
        prog="ridgelab",
        description="Learning curves and phase diagrams for feature-subsampled ridge ensembles",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s curve --config configs/heterogeneous_curve.json --out curve.csv
  %(prog)s phase --config configs/phase_ridgeless.json --format json
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _report_invalid(exc: ConfigValidationError) -> int:
    print("invalid experiment document:", file=sys.stderr)
    for path, msg in exc.errors:
        print(f"  {path}: {msg}", file=sys.stderr)
    return EXIT_INVALID


def _check_kind(command: str, config: Any) -> None:
    expected = _EXPECTED_KIND[command]
    if not isinstance(config, expected):
        kind = expected.model_fields["kind"].default
        raise ConfigValidationError([("$.kind", f"'{command}' needs a {kind!r} document, got {config.kind!r}")])
    if command == "simulate" and config.simulation is None:
        raise ConfigValidationError([("$.simulation", "'simulate' needs a simulation block")])


def _run(command: str, config: Any, args: argparse.Namespace) -> SweepGrid:
    if command == "theory":
        if config.theory == "none":
            raise ConfigValidationError([("$.theory", "'theory' needs a general or equicorr backend")])
        return theory_point_sweep(config, seed=args.seed, dump_order_params=args.dump_order_params)
    if command in ("curve", "simulate"):
        if command == "simulate":
            config = config.model_copy(update={"theory": "none"})
        return learning_curve_sweep(
            config,
            seed=args.seed,
            threads=args.threads,
            full_matrix=args.full_matrix,
            dump_order_params=args.dump_order_params,
        )
    if command == "phase":
        return phase_diagram_sweep(config, seed=args.seed, threads=args.threads)
    return classify_sweep(config, seed=args.seed, threads=args.threads)


def _progress_logger(config_name: str) -> Callable[..., None]:
    def _on_cell(sender: str, *, index: int, total: int, failed: bool) -> None:
        log.debug("sweep.progress", sweep=sender, cell=index, total=total, failed=failed, config=config_name)

    return _on_cell


def _note_divergence(grid: SweepGrid) -> None:
    for name in ("E_g", "sim_mean"):
        if name in grid.columns:
            n_inf = sum(1 for c in grid.cells if c.values.get(name) == float("inf"))
            if n_inf:
                log.warning("sweep.divergent_cells", column=name, count=n_inf)
                print(f"note: {n_inf} cell(s) diverge ({name} = inf)", file=sys.stderr)


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.verbose:
        setup_debug_logging(True)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print(f"--seed must be an unsigned 64-bit integer, got {args.seed}", file=sys.stderr)
        return EXIT_INVALID

    try:
        config = load_config(args.config)
        if args.command == "validate-config":
            seed = config.seed if args.seed is None else args.seed
            print(f"ok {config.kind} {config_hash(config, seed)}")
            return EXIT_OK
        _check_kind(args.command, config)
    except ConfigValidationError as exc:
        return _report_invalid(exc)

    receiver = _progress_logger(Path(args.config).name)
    cell_finished.connect(receiver)
    try:
        grid = _run(args.command, config, args)
    except ConfigValidationError as exc:
        return _report_invalid(exc)
    except (RidgeLabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    finally:
        cell_finished.disconnect(receiver)

    _note_divergence(grid)
    failed = list(iter_failed(grid))
    computed = [c for c in grid.cells if c.values or c.failed]
    if failed and len(failed) == len(computed):
        print(f"error: all {len(computed)} cells failed; first: {failed[0].error}", file=sys.stderr)
        return EXIT_NUMERICAL
    if failed:
        where = ", ".join(f"{name}={value:g}" for name, value in failed[0].coords.items())
        print(
            f"note: {len(failed)} of {len(grid.cells)} cells failed; first at {where}: {failed[0].error}",
            file=sys.stderr,
        )

    if args.out:
        try:
            emit(grid, args.format, args.out)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
    else:
        sys.stdout.buffer.write(dumps_grid(grid, args.format))
        sys.stdout.flush()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
