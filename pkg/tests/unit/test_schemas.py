"""
tests/unit/test_schemas.py

Unit tests for experiment-document validation and parsing.
Verifies the curve, phase and classify models against hand-written documents
and the shipped configs/ examples.
"""

import math
from pathlib import Path
import unittest

import orjson

from config import settings
from core.covariance import PlanStrategy
from core.errors import ConfigValidationError
from services.schemas import (
    AxisConfig,
    ClassifyConfig,
    EnsembleConfig,
    LearningCurveConfig,
    PhaseConfig,
    config_hash,
    load_config,
    parse_config,
    read_document,
)


def _curve(**overrides):
    doc = {
        "covariance": {"M": 100, "s": 1.0, "c": 0.2},
        "alpha": [0.5, 1.0, 2.0],
    }
    doc.update(overrides)
    return doc


def _paths(exc: ConfigValidationError) -> list[str]:
    return [path for path, _ in exc.errors]


class TestCurveDocuments(unittest.TestCase):
    """LearningCurveConfig parsing"""

    def test_minimal_document_defaults(self):
        """No kind means a curve; alpha given as a bare list"""
        config = parse_config(_curve())
        self.assertIsInstance(config, LearningCurveConfig)
        self.assertEqual(config.theory, "equicorr")
        self.assertEqual(config.alpha.name, "alpha")
        self.assertEqual(config.alpha.resolved(), [0.5, 1.0, 2.0])
        self.assertEqual(config.ensemble.strategy, PlanStrategy.HOMOGENEOUS)
        self.assertEqual(config.seed, settings.DEFAULT_SEED)

    def test_log_axis(self):
        config = parse_config(_curve(alpha={"scale": "log", "start": 0.1, "stop": 10.0, "num": 3}))
        values = config.alpha.resolved()
        self.assertAlmostEqual(values[1], 1.0, places=12)
        self.assertEqual(len(values), 3)

    def test_field_errors_carry_json_paths(self):
        with self.assertRaises(ConfigValidationError) as ctx:
            parse_config(_curve(covariance={"M": 0}))
        self.assertIn("$.covariance.M", _paths(ctx.exception))

    def test_unknown_key_rejected(self):
        with self.assertRaises(ConfigValidationError) as ctx:
            parse_config(_curve(bogus=1))
        self.assertIn("$.bogus", _paths(ctx.exception))

    def test_nonpositive_alpha_rejected(self):
        with self.assertRaises(ConfigValidationError) as ctx:
            parse_config(_curve(alpha=[0.0, 1.0]))
        self.assertIn("$.alpha", _paths(ctx.exception))

    def test_equicorr_needs_equicorrelated_covariance(self):
        doc = _curve(covariance={"kind": "toeplitz", "M": 50, "signal_base": 0.5})
        with self.assertRaises(ConfigValidationError) as ctx:
            parse_config(doc)
        self.assertIn("equicorr", str(ctx.exception))
        config = parse_config({**doc, "theory": "general", "lam": 0.01})
        self.assertEqual(config.covariance.build().dimension, 50)

    def test_per_readout_lists_must_match_k(self):
        with self.assertRaises(ConfigValidationError):
            parse_config(_curve(ensemble={"k": 3}, eta=[0.1, 0.2]))
        config = parse_config(_curve(ensemble={"k": 2}, eta=[0.1, 0.2]))
        self.assertEqual(config.eta, [0.1, 0.2])

    def test_theory_none_needs_simulation(self):
        with self.assertRaises(ConfigValidationError):
            parse_config(_curve(theory="none"))
        parse_config(_curve(theory="none", simulation={"n_trials": 3}))

    def test_axis_rules(self):
        with self.assertRaises(ConfigValidationError):
            parse_config(_curve(axes=[{"name": "gamma", "values": [1.0]}]))
        with self.assertRaises(ConfigValidationError):
            parse_config(_curve(ensemble={"k": 2}, axes=[{"name": "nu", "values": [0.5]}]))
        with self.assertRaises(ConfigValidationError):
            parse_config(_curve(ensemble={"k": 2, "fractions": [0.2, 0.3]}, axes=[{"name": "k", "values": [1, 2]}]))
        config = parse_config(_curve(axes=[{"name": "lam", "values": [0.01, 0.1]}]))
        self.assertEqual(config.axes[0].resolved(), [0.01, 0.1])

    def test_k_bounded_by_m(self):
        with self.assertRaises(ConfigValidationError):
            parse_config(_curve(covariance={"M": 4}, ensemble={"k": 5}))


class TestEnsembleConfig(unittest.TestCase):
    def test_strategy_rules(self):
        with self.assertRaises(ValueError):
            EnsembleConfig(strategy="heterogeneous", k=4)
        with self.assertRaises(ValueError):
            EnsembleConfig(strategy="explicit", k=2)
        with self.assertRaises(ValueError):
            EnsembleConfig(k=2, n_plan_draws=3)
        with self.assertRaises(ValueError):
            EnsembleConfig(k=2, fractions=[0.5])

    def test_explicit_masks_build(self):
        ens = EnsembleConfig(strategy="explicit", masks=[[0, 1], [2, 3, 4]])
        self.assertEqual(ens.size, 2)
        plan = ens.build_plan(6, seed=0)
        self.assertTrue(plan.exclusive)
        self.assertEqual(plan.sizes.tolist(), [2, 3])

    def test_sampled_plan_reproducible(self):
        ens = EnsembleConfig(strategy="replacement", k=3)
        a, b = ens.build_plan(30, seed=7), ens.build_plan(30, seed=7)
        for m1, m2 in zip(a.masks, b.masks):
            self.assertEqual(m1.tolist(), m2.tolist())


class TestPhaseAndClassifyDocuments(unittest.TestCase):
    def test_phase_document(self):
        config = parse_config(
            {"kind": "phase", "x": {"name": "alpha", "values": [1.0]}, "y": {"name": "H", "values": [0.0]}}
        )
        self.assertIsInstance(config, PhaseConfig)
        self.assertEqual(config.mode.value, "ridgeless")

    def test_phase_axis_rules(self):
        base = {"kind": "phase", "x": {"name": "alpha", "values": [1.0]}}
        for y, extra in [
            ({"name": "alpha", "values": [2.0]}, {}),
            ({"name": "lam", "values": [2.0]}, {}),
            ({"name": "rho", "values": [0.1]}, {"reg_mode": "locally_optimal", "rho": 1.0}),
        ]:
            with self.assertRaises(ConfigValidationError):
                parse_config({**base, "y": y, **extra})
        with self.assertRaises(ConfigValidationError):
            parse_config(
                {
                    "kind": "phase",
                    "x": {"name": "H", "values": [0.0]},
                    "y": {"name": "W", "values": [0.0]},
                    "append_alpha_infinity": True,
                }
            )

    def test_classify_needs_one_source(self):
        doc = {"kind": "classify", "train_sizes": [10, 20]}
        with self.assertRaises(ConfigValidationError):
            parse_config(doc)
        both = {
            **doc,
            "synthetic": {"M": 8, "C": 2, "n_train": 30, "n_test": 30},
            "files": {"train_path": "a.csv", "test_path": "b.csv"},
        }
        with self.assertRaises(ConfigValidationError):
            parse_config(both)
        config = parse_config({**doc, "synthetic": both["synthetic"]})
        self.assertIsInstance(config, ClassifyConfig)
        self.assertEqual(config.train_sizes.name, "P")

    def test_classify_train_sizes_integers(self):
        with self.assertRaises(ConfigValidationError):
            parse_config(
                {"kind": "classify", "train_sizes": [10.5], "synthetic": {"M": 8, "C": 2, "n_train": 30, "n_test": 30}}
            )


class TestLoadingAndHashing(unittest.TestCase):
    def test_shipped_configs_validate(self):
        paths = sorted(settings.CONFIGS_DIR.glob("*.json")) + sorted(settings.CONFIGS_DIR.glob("*.yml"))
        self.assertGreater(len(paths), 0)
        for path in paths:
            with self.subTest(path=path.name):
                load_config(path)

    def test_bad_json_reports_root(self):
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "broken.json"
            path.write_text("{not json", encoding="utf-8")
            with self.assertRaises(ConfigValidationError) as ctx:
                read_document(path)
            self.assertEqual(_paths(ctx.exception), ["$"])
            with self.assertRaises(ConfigValidationError):
                read_document(Path(tmp) / "missing.json")

    def test_hash_stable_and_seed_sensitive(self):
        a = parse_config(_curve(seed=3))
        b = parse_config(orjson.loads(orjson.dumps(_curve(seed=3))))
        self.assertEqual(config_hash(a, 3), config_hash(b, 3))
        self.assertNotEqual(config_hash(a, 3), config_hash(a, 4))
        self.assertEqual(len(config_hash(a)), 64)

    def test_hash_handles_infinite_values(self):
        axis = AxisConfig(name="alpha", values=[1.0, math.inf])
        self.assertEqual(config_hash(axis), config_hash(AxisConfig(name="alpha", values=[1.0, math.inf])))
