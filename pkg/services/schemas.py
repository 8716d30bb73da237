"""
services/schemas.py

Pydantic models for experiment documents.

Three document kinds share one loader:

- ``curve``     learning curves (theory backend, optional simulation overlay)
- ``phase``     k* phase diagrams over two of alpha / H / W / Z / rho
- ``classify``  classifier ensembles on feature datasets

Documents are JSON or YAML. Validation failures surface as
ConfigValidationError with JSON-path locations (``$.alpha.values``).
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

import numpy as np
import orjson
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, field_validator, model_validator
import yaml

from config import settings
from core.covariance import (
    CovarianceSpec,
    PlanStrategy,
    SubsamplingPlan,
    TruthScheme,
    sample_subsampling_plan,
    toeplitz_covariance,
)
from core.errors import ConfigValidationError
from core.theory_equicorr import RegMode


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ==================== Building blocks ====================


class AxisConfig(_Strict):
    """A sweep axis: explicit ``values`` or ``start``/``stop``/``num`` on a linear or log scale."""

    name: str
    scale: Literal["linear", "log"] = "linear"
    values: Optional[list[float]] = None
    start: Optional[float] = None
    stop: Optional[float] = None
    num: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _resolve(self) -> AxisConfig:
        if self.values is None:
            if self.start is None or self.stop is None or self.num is None:
                raise ValueError("axis needs 'values' or all of 'start', 'stop', 'num'")
            if self.scale == "log" and (self.start <= 0 or self.stop <= 0):
                raise ValueError("log axis bounds must be positive")
        elif len(self.values) == 0:
            raise ValueError("axis values must not be empty")
        return self

    def resolved(self) -> list[float]:
        if self.values is not None:
            return [float(v) for v in self.values]
        assert self.start is not None and self.stop is not None and self.num is not None
        if self.scale == "log":
            return np.geomspace(self.start, self.stop, self.num).tolist()
        return np.linspace(self.start, self.stop, self.num).tolist()


class CovarianceConfig(_Strict):
    kind: Literal["equicorrelated", "toeplitz", "explicit"] = "equicorrelated"
    M: int = Field(ge=1)
    # equicorrelated
    s: float = Field(default=1.0, gt=0)
    c: float = Field(default=0.0, ge=0, le=1)
    omega2: float = Field(default=0.0, ge=0)
    # toeplitz: signal_scale * signal_base^|i-j|, noise likewise
    signal_base: float = Field(default=0.0, ge=-1, le=1)
    signal_scale: float = Field(default=1.0, gt=0)
    noise_base: float = Field(default=0.0, ge=-1, le=1)
    noise_scale: float = Field(default=0.0, ge=0)
    # explicit
    signal: Optional[list[list[float]]] = None
    noise: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def _check_kind(self) -> CovarianceConfig:
        if self.kind == "explicit":
            if self.signal is None:
                raise ValueError("explicit covariance needs 'signal'")
            if len(self.signal) != self.M:
                raise ValueError(f"'signal' has {len(self.signal)} rows but M={self.M}")
        elif self.signal is not None or self.noise is not None:
            raise ValueError(f"'signal'/'noise' matrices are only read for kind 'explicit', not {self.kind!r}")
        return self

    def build(self) -> CovarianceSpec:
        if self.kind == "equicorrelated":
            return CovarianceSpec.equicorrelated(self.s, self.c, self.omega2, self.M)
        if self.kind == "toeplitz":
            noise = toeplitz_covariance(self.noise_base, self.M, self.noise_scale) if self.noise_scale > 0 else None
            return CovarianceSpec.explicit(toeplitz_covariance(self.signal_base, self.M, self.signal_scale), noise)
        noise_m = None if self.noise is None else np.asarray(self.noise, dtype=np.float64)
        return CovarianceSpec.explicit(np.asarray(self.signal, dtype=np.float64), noise_m)


class EnsembleConfig(_Strict):
    strategy: PlanStrategy = PlanStrategy.HOMOGENEOUS
    k: int = Field(default=1, ge=1)
    sigma: float = Field(default=0.0, ge=0)
    n_plan_draws: int = Field(default=1, ge=1)
    fractions: Optional[list[Annotated[float, Field(gt=0, le=1)]]] = None
    masks: Optional[list[list[int]]] = None
    redraw_masks: bool = False

    @model_validator(mode="after")
    def _check_strategy(self) -> EnsembleConfig:
        if self.strategy is PlanStrategy.EXPLICIT:
            if not self.masks:
                raise ValueError("explicit ensembles need 'masks'")
            if self.k != 1 and self.k != len(self.masks):
                raise ValueError(f"k={self.k} disagrees with {len(self.masks)} masks")
        elif self.masks is not None:
            raise ValueError("'masks' is only read for the explicit strategy")
        if self.strategy is PlanStrategy.HETEROGENEOUS and self.sigma <= 0:
            raise ValueError("heterogeneous ensembles need sigma > 0")
        if self.fractions is not None and len(self.fractions) != self.k:
            raise ValueError(f"expected {self.k} fractions, got {len(self.fractions)}")
        if self.n_plan_draws > 1 and self.strategy is not PlanStrategy.HETEROGENEOUS:
            raise ValueError("n_plan_draws > 1 only applies to heterogeneous ensembles")
        return self

    @property
    def size(self) -> int:
        return len(self.masks) if self.masks else self.k

    def build_plan(self, M: int, seed: int) -> SubsamplingPlan:
        if self.strategy is PlanStrategy.EXPLICIT:
            assert self.masks is not None
            return SubsamplingPlan.from_masks(self.masks, M, seed=seed)
        return sample_subsampling_plan(self.strategy, self.k, M, seed, sigma=self.sigma, fractions_override=self.fractions)


class TruthConfig(_Strict):
    rho: float = Field(default=0.0, ge=-1, le=1)
    scheme: TruthScheme = TruthScheme.SPIKED
    # general backend: average over w0 instead of using one realization
    averaged: bool = True


class SimulationConfig(_Strict):
    n_trials: int = Field(default=20, ge=1)


# ==================== Documents ====================


ScalarOrList = Union[float, list[float]]


def _named_axis(v: Any, name: str) -> Any:
    if isinstance(v, list):
        return {"name": name, "values": v}
    if isinstance(v, dict) and "name" not in v:
        return {**v, "name": name}
    return v


CURVE_AXES = ("lam", "nu", "eta", "zeta", "rho", "k")
PHASE_AXES = ("alpha", "H", "W", "Z", "rho")


class LearningCurveConfig(_Strict):
    kind: Literal["curve"] = "curve"
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED, ge=0, lt=2**64)
    theory: Literal["general", "equicorr", "none"] = "equicorr"
    covariance: CovarianceConfig
    ensemble: EnsembleConfig = EnsembleConfig()
    truth: TruthConfig = TruthConfig()
    zeta: float = Field(default=0.0, ge=0)
    eta: ScalarOrList = 0.0
    lam: ScalarOrList = 0.0
    alpha: AxisConfig
    axes: list[AxisConfig] = Field(default_factory=list)
    simulation: Optional[SimulationConfig] = None

    @field_validator("alpha", mode="before")
    @classmethod
    def _name_alpha(cls, v: Any) -> Any:
        return _named_axis(v, "alpha")

    @field_validator("alpha")
    @classmethod
    def _alpha_positive(cls, v: AxisConfig) -> AxisConfig:
        if v.name != "alpha":
            raise ValueError("the alpha axis must be named 'alpha'")
        if any(not a > 0 for a in v.resolved()):
            raise ValueError("alpha values must be positive")
        return v

    @field_validator("axes")
    @classmethod
    def _known_axes(cls, v: list[AxisConfig]) -> list[AxisConfig]:
        names = [a.name for a in v]
        for name in names:
            if name not in CURVE_AXES:
                raise ValueError(f"unknown axis {name!r}; expected one of {', '.join(CURVE_AXES)}")
        if len(set(names)) != len(names):
            raise ValueError("axis names must be unique")
        return v

    @field_validator("eta", "lam")
    @classmethod
    def _non_negative(cls, v: ScalarOrList) -> ScalarOrList:
        values = v if isinstance(v, list) else [v]
        if any(x < 0 for x in values):
            raise ValueError("must be non-negative")
        return v

    @model_validator(mode="after")
    def _check_backend(self) -> LearningCurveConfig:
        k = self.ensemble.size
        for name in ("eta", "lam"):
            v = getattr(self, name)
            if isinstance(v, list) and len(v) != k:
                raise ValueError(f"'{name}' lists need one entry per readout ({k})")
        if self.theory == "equicorr" and self.covariance.kind != "equicorrelated":
            raise ValueError("the equicorr backend needs an equicorrelated covariance")
        if self.theory == "none" and self.simulation is None:
            raise ValueError("theory 'none' without a simulation block computes nothing")
        if self.ensemble.size > self.covariance.M:
            raise ValueError(f"k={self.ensemble.size} exceeds M={self.covariance.M}")
        names = {a.name for a in self.axes}
        if "nu" in names and (self.ensemble.size != 1 or self.ensemble.strategy is PlanStrategy.EXPLICIT):
            raise ValueError("the 'nu' axis sweeps a single sampled readout (k=1)")
        if "k" in names:
            if self.ensemble.strategy is PlanStrategy.EXPLICIT or self.ensemble.fractions is not None:
                raise ValueError("the 'k' axis cannot be combined with explicit masks or fractions")
            if isinstance(self.eta, list) or isinstance(self.lam, list):
                raise ValueError("the 'k' axis needs scalar 'eta' and 'lam'")
        return self


class PhaseConfig(_Strict):
    kind: Literal["phase"] = "phase"
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED, ge=0, lt=2**64)
    reg_mode: Literal["ridgeless", "locally_optimal"] = "ridgeless"
    x: AxisConfig
    y: AxisConfig
    alpha: float = Field(default=1.0, gt=0)
    H: float = Field(default=0.0, ge=0)
    W: float = Field(default=0.0, ge=0)
    Z: float = Field(default=0.0, ge=0)
    rho: float = Field(default=0.0, ge=-1, le=1)
    k_max: int = Field(default=100, ge=1)
    append_alpha_infinity: bool = False

    @model_validator(mode="after")
    def _check_axes(self) -> PhaseConfig:
        for axis in (self.x, self.y):
            if axis.name not in PHASE_AXES:
                raise ValueError(f"unknown phase axis {axis.name!r}; expected one of {', '.join(PHASE_AXES)}")
        if self.x.name == self.y.name:
            raise ValueError("phase axes must differ")
        if self.append_alpha_infinity and "alpha" not in (self.x.name, self.y.name):
            raise ValueError("append_alpha_infinity needs an alpha axis")
        if self.reg_mode == "locally_optimal" and abs(self.rho) >= 1:
            raise ValueError("locally optimal ridge needs |rho| < 1")
        return self

    @property
    def mode(self) -> RegMode:
        return RegMode(self.reg_mode)


class BlobDatasetConfig(_Strict):
    M: int = Field(ge=1)
    C: int = Field(ge=2)
    n_train: int = Field(ge=1)
    n_test: int = Field(ge=1)
    separation: float = Field(default=3.0, gt=0)
    within_scale: float = Field(default=1.0, gt=0)


class FileDatasetConfig(_Strict):
    train_path: Path
    test_path: Path
    format: Literal["csv", "packed"] = "csv"
    label_column: str = "label"
    center: bool = False


class ClassifyConfig(_Strict):
    kind: Literal["classify"] = "classify"
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED, ge=0, lt=2**64)
    eval_seed: int = Field(default=1, ge=0, lt=2**64)
    synthetic: Optional[BlobDatasetConfig] = None
    files: Optional[FileDatasetConfig] = None
    ensemble: EnsembleConfig = EnsembleConfig()
    lam: float = Field(default=0.0, ge=0)
    eta: float = Field(default=0.0, ge=0)
    train_sizes: AxisConfig
    n_trials: int = Field(default=1, ge=1)

    @field_validator("train_sizes", mode="before")
    @classmethod
    def _name_train_sizes(cls, v: Any) -> Any:
        return _named_axis(v, "P")

    @model_validator(mode="after")
    def _one_source(self) -> ClassifyConfig:
        if (self.synthetic is None) == (self.files is None):
            raise ValueError("give exactly one of 'synthetic' and 'files'")
        if any(p < 1 or int(p) != p for p in self.train_sizes.resolved()):
            raise ValueError("train_sizes must be positive integers")
        return self


ExperimentConfig = Annotated[
    Union[LearningCurveConfig, PhaseConfig, ClassifyConfig],
    Field(discriminator="kind"),
]

_ADAPTER: TypeAdapter[Any] = TypeAdapter(ExperimentConfig)


# ==================== Loading ====================


def _json_path(loc: tuple[Any, ...]) -> str:
    path = "$"
    for part in loc:
        if isinstance(part, int):
            path += f"[{part}]"
        elif part in ("curve", "phase", "classify"):
            # discriminator tag inserted by pydantic, not a document key
            continue
        else:
            path += f".{part}"
    return path


def validation_errors(exc: ValidationError) -> list[tuple[str, str]]:
    return [(_json_path(tuple(err["loc"])), err["msg"]) for err in exc.errors()]


def parse_config(document: Any) -> Union[LearningCurveConfig, PhaseConfig, ClassifyConfig]:
    if isinstance(document, dict) and "kind" not in document:
        document = {**document, "kind": "curve"}
    try:
        return _ADAPTER.validate_python(document)
    except ValidationError as exc:
        raise ConfigValidationError(validation_errors(exc)) from exc


def read_document(path: Path | str) -> Any:
    """Raw JSON or YAML document; the extension picks the parser."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigValidationError([("$", f"cannot read {path}: {exc.strerror or exc}")]) from exc
    try:
        if path.suffix.lower() in (".yml", ".yaml"):
            return yaml.safe_load(raw)
        return orjson.loads(raw)
    except (orjson.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigValidationError([("$", f"{path} does not parse: {exc}")]) from exc


def load_config(path: Path | str) -> Union[LearningCurveConfig, PhaseConfig, ClassifyConfig]:
    return parse_config(read_document(path))


def _canonical(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {k: _canonical(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_canonical(v) for v in value]
    return value


def config_hash(config: BaseModel, seed: Optional[int] = None) -> str:
    """SHA-256 over the validated document (sorted keys) and the effective seed."""
    payload = _canonical(config.model_dump(mode="json"))
    if seed is not None:
        payload["seed"] = seed
    return hashlib.sha256(orjson.dumps(payload, option=orjson.OPT_SORT_KEYS)).hexdigest()
