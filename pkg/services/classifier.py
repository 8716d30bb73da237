"""
services/classifier.py

Multi-class ridge readout ensembles over feature datasets.

Each readout r sees the masked features A_r phi / sqrt(N_r) and is trained
against one-hot targets with injected readout noise Xi_r ~ N(0, eta^2). At
prediction time every readout adds fresh noise to its class scores and votes
for its argmax; the ensemble returns the plurality class.

Feature files:
    csv     header row, float feature columns, integer label column
    packed  b"SRDG1", little-endian u64 n, u64 M, u64 C,
            n*M float64 (row-major), n int32 labels
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
import io
import math
from pathlib import Path
import struct
from typing import Literal, Optional, Sequence

import numpy as np

from core.covariance import SubsamplingPlan
from core.errors import DatasetFormatError, ParameterError
from core.ridge import solve_ridge
from core.seeding import derive_rng
from utils.atomic_persistence import write_bytes_atomic
from utils.logger import get_logger


log = get_logger(__name__)

PACKED_MAGIC = b"SRDG1"
_PACKED_HEADER = struct.Struct("<QQQ")
EVAL_BLOCK = 256

Split = Literal["train", "test"]
FileFormat = Literal["csv", "packed"]


# ==================== Datasets ====================


@dataclass(frozen=True, eq=False)
class FeatureDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: Split = "train"

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise ParameterError(f"features must be a non-empty n x M matrix, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ParameterError(f"expected {features.shape[0]} labels, got shape {labels.shape}")
        if not np.all(np.isfinite(features)):
            raise ParameterError("features contain missing or non-finite values")
        if self.n_classes < 1:
            raise ParameterError(f"class count must be positive, got {self.n_classes}")
        bad = np.flatnonzero((labels < 0) | (labels >= self.n_classes))
        if bad.size:
            raise DatasetFormatError(
                f"label {labels[bad[0]]} outside [0, {self.n_classes - 1}]", row=int(bad[0])
            )
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def M(self) -> int:
        return int(self.features.shape[1])

    def one_hot(self) -> np.ndarray:
        Y = np.zeros((self.n, self.n_classes))
        Y[np.arange(self.n), self.labels] = 1.0
        return Y

    def subset(self, rows: np.ndarray | slice) -> FeatureDataset:
        return replace(self, features=self.features[rows], labels=self.labels[rows])

    def centered(self) -> FeatureDataset:
        return replace(self, features=self.features - self.features.mean(axis=0))


def _infer_format(path: Path, fmt: Optional[FileFormat]) -> FileFormat:
    if fmt is not None:
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "packed"


def _read_csv(path: Path, label_column: str) -> tuple[np.ndarray, np.ndarray]:
    text = path.read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetFormatError("empty file", path=str(path), line=1) from None
    header = [h.strip() for h in header]
    if label_column not in header:
        raise DatasetFormatError(f"no {label_column!r} column in header", path=str(path), line=1)
    label_idx = header.index(label_column)
    width = len(header)

    rows: list[list[float]] = []
    labels: list[int] = []
    for row_no, row in enumerate(reader):
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != width:
            raise DatasetFormatError(
                f"expected {width} columns, got {len(row)}", path=str(path), line=line, row=row_no
            )
        try:
            label_text = row[label_idx].strip()
            label_value = float(label_text)
            if not label_value.is_integer():
                raise ValueError(f"label {label_text!r} is not an integer")
            values = [float(cell) for i, cell in enumerate(row) if i != label_idx]
        except ValueError as exc:
            raise DatasetFormatError(str(exc), path=str(path), line=line, row=row_no) from None
        labels.append(int(label_value))
        rows.append(values)
    if not rows:
        raise DatasetFormatError("no data rows", path=str(path), line=reader.line_num)
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)


def _read_packed(path: Path) -> tuple[np.ndarray, np.ndarray, int]:
    raw = path.read_bytes()
    if not raw.startswith(PACKED_MAGIC):
        raise DatasetFormatError("missing SRDG1 magic bytes", path=str(path))
    offset = len(PACKED_MAGIC)
    if len(raw) < offset + _PACKED_HEADER.size:
        raise DatasetFormatError("truncated header", path=str(path))
    n, M, C = _PACKED_HEADER.unpack_from(raw, offset)
    offset += _PACKED_HEADER.size
    expected = offset + 8 * n * M + 4 * n
    if len(raw) != expected:
        raise DatasetFormatError(f"expected {expected} bytes for n={n}, M={M}, got {len(raw)}", path=str(path))
    features = np.frombuffer(raw, dtype="<f8", count=n * M, offset=offset).reshape(n, M)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=offset + 8 * n * M)
    return features.astype(np.float64), labels.astype(np.int64), int(C)


def load_feature_dataset(
    path: Path | str,
    format: Optional[FileFormat] = None,
    *,
    label_column: str = "label",
    n_classes: Optional[int] = None,
    center: bool = False,
    split: Split = "train",
) -> FeatureDataset:
    """
    Read a feature file. CSV class counts default to max(label) + 1; packed files
    carry their own. Centering subtracts the column means of this file only.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError("file does not exist", path=str(path))
    fmt = _infer_format(path, format)
    if fmt == "csv":
        features, labels = _read_csv(path, label_column)
        C = n_classes if n_classes is not None else int(labels.max()) + 1
    else:
        features, labels, C = _read_packed(path)
        if n_classes is not None and n_classes != C:
            raise DatasetFormatError(f"file declares C={C}, caller expects {n_classes}", path=str(path))
    try:
        ds = FeatureDataset(features=features, labels=labels, n_classes=C, split=split)
    except DatasetFormatError as exc:
        raise DatasetFormatError(exc.message, path=str(path), row=exc.row) from None
    log.debug("dataset.loaded", path=str(path), n=ds.n, M=ds.M, C=C, format=fmt)
    return ds.centered() if center else ds


def write_feature_dataset(
    dataset: FeatureDataset,
    path: Path | str,
    format: Optional[FileFormat] = None,
    *,
    label_column: str = "label",
) -> Path:
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"f{j}" for j in range(dataset.M)] + [label_column])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(x)) for x in row] + [int(label)])
        payload = buf.getvalue().encode("utf-8")
    else:
        payload = b"".join(
            (
                PACKED_MAGIC,
                _PACKED_HEADER.pack(dataset.n, dataset.M, dataset.n_classes),
                np.ascontiguousarray(dataset.features, dtype="<f8").tobytes(),
                np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes(),
            )
        )
    return write_bytes_atomic(payload, path)


def synthetic_blob_dataset(
    M: int,
    C: int,
    n: int,
    seed: int,
    *,
    split: Split = "train",
    separation: float = 3.0,
    within_scale: float = 1.0,
) -> FeatureDataset:
    """
    Balanced Gaussian blobs: class centers mu_c ~ N(0, separation^2 / M I) shared by
    both splits, examples mu_label + N(0, within_scale^2 / M I).
    """
    if M < 1 or C < 2 or n < 1:
        raise ParameterError("need M >= 1, C >= 2 and n >= 1")
    centers = derive_rng(seed, "blobs", 0).standard_normal((C, M)) * (separation / math.sqrt(M))
    rng = derive_rng(seed, "blobs", 1 if split == "train" else 2)
    labels = rng.permutation(np.arange(n) % C)
    features = centers[labels] + rng.standard_normal((n, M)) * (within_scale / math.sqrt(M))
    return FeatureDataset(features=features, labels=labels, n_classes=C, split=split)


# ==================== Ensemble ====================


@dataclass(frozen=True, eq=False)
class ClassifierEnsemble:
    weights: tuple[np.ndarray, ...]
    plan: SubsamplingPlan
    lam: float
    eta: float
    seed: int
    n_classes: int

    @property
    def k(self) -> int:
        return len(self.weights)


def train_classifier_ensemble(
    train: FeatureDataset,
    plan: SubsamplingPlan,
    lam: float,
    eta: float,
    seed: int,
    *,
    stream: Sequence[int] = (),
) -> ClassifierEnsemble:
    """W_r = ridge(A_r Phi / sqrt(N_r), Y - Xi_r, lam); lam = 0 is the pseudoinverse rule."""
    if plan.dimension != train.M:
        raise ParameterError(f"plan is over M={plan.dimension} features but the dataset has M={train.M}")
    if eta < 0:
        raise ParameterError(f"eta must be non-negative, got {eta}")
    Y = train.one_hot()
    weights = []
    for r, mask in enumerate(plan.masks):
        X = train.features[:, mask] / math.sqrt(mask.size)
        xi = eta * derive_rng(seed, "class-train", *stream, r).standard_normal(Y.shape)
        W = solve_ridge(X, Y - xi, lam)
        W.setflags(write=False)
        weights.append(W)
    return ClassifierEnsemble(
        weights=tuple(weights), plan=plan, lam=float(lam), eta=float(eta), seed=seed, n_classes=train.n_classes
    )


def readout_scores(ensemble: ClassifierEnsemble, features: np.ndarray, eval_seed: int) -> np.ndarray:
    """k x n x C noisy class scores; noise for readout r and example block b comes from ("class-eval", r, b)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != ensemble.plan.dimension:
        raise ParameterError(f"expected an n x {ensemble.plan.dimension} feature matrix, got {features.shape}")
    n, C = features.shape[0], ensemble.n_classes
    scores = np.empty((ensemble.k, n, C))
    for r, (W, mask) in enumerate(zip(ensemble.weights, ensemble.plan.masks)):
        scores[r] = features[:, mask] @ W / math.sqrt(mask.size)
        if ensemble.eta > 0:
            for b, start in enumerate(range(0, n, EVAL_BLOCK)):
                stop = min(start + EVAL_BLOCK, n)
                noise = derive_rng(eval_seed, "class-eval", r, b).standard_normal((stop - start, C))
                scores[r, start:stop] += ensemble.eta * noise
    return scores


def aggregate_votes(scores: np.ndarray) -> np.ndarray:
    """
    Plurality of per-readout argmax votes. Ties go to the tied class with the
    largest summed score, then to the lowest class index.
    """
    k, n, C = scores.shape
    votes = np.argmax(scores, axis=2)
    counts = np.zeros((n, C), dtype=np.int64)
    for r in range(k):
        counts[np.arange(n), votes[r]] += 1
    tied = counts == counts.max(axis=1, keepdims=True)
    summed = np.where(tied, scores.sum(axis=0), -np.inf)
    return np.argmax(summed, axis=1)


def majority_vote_predict(ensemble: ClassifierEnsemble, features: np.ndarray, eval_seed: int) -> np.ndarray:
    return aggregate_votes(readout_scores(ensemble, features, eval_seed))


def classification_error(ensemble: ClassifierEnsemble, test: FeatureDataset, eval_seed: int) -> float:
    """Fraction of test examples whose ensemble vote differs from the label."""
    predicted = majority_vote_predict(ensemble, test.features, eval_seed)
    return float(np.mean(predicted != test.labels))
