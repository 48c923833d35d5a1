#!/usr/bin/env python3
"""
surrogate.py
------------

Performance predictors over 6-gene architecture encodings.

Input:
    - sample archive (JSON lines of FitnessRecord) or a TrainingArchive
    - surrogate kinds: decision_tree, gaussian_process, random_forest

Output:
    - SurrogateModel (fitted regressor + minimize flag), persisted with joblib
    - SurrogateReport (per-kind K-fold CV MSE, selected kind, optional holdout KTau/MSE)
    - surrogate comparison table (repeated random holdouts, MSE and KTau per kind)

Encodings are one-hot expanded (4+3+6+8+8+4 = 33 features). The regressors always fit the
raw metric; the search applies the minimize flag.
"""

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import joblib
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import kendalltau
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.ensemble import RandomForestRegressor
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF
from sklearn.metrics import mean_squared_error
from sklearn.model_selection import KFold, cross_val_score, train_test_split
from sklearn.preprocessing import OneHotEncoder
from sklearn.tree import DecisionTreeRegressor

from search_space import (
    DEFAULT_TABLE,
    ArchitectureEncoding,
    OperationTable,
    validate_encoding,
)
from trainer import FitnessRecord

KINDS = ("decision_tree", "gaussian_process", "random_forest")
SURROGATE_VERSION = 1


class ArchiveTooSmallError(ValueError):
    pass


class LengthMismatchError(ValueError):
    pass


class SurrogateConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    folds: int = Field(default=5, ge=2)
    seed: int = 0
    kinds: Tuple[str, ...] = KINDS
    holdout_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)


# --- Featurization --------------------------------------------------------------------

@lru_cache(maxsize=None)
def _one_hot(table: OperationTable) -> OneHotEncoder:
    categories = [list(range(b)) for b in table.bounds]
    encoder = OneHotEncoder(categories=categories, sparse_output=False, dtype=np.float64)
    return encoder.fit(np.zeros((1, len(categories)), dtype=np.int64))


def featurize_many(encodings: Sequence[ArchitectureEncoding],
                   table: OperationTable = DEFAULT_TABLE) -> np.ndarray:
    genes = np.asarray([enc.to_list() for enc in encodings], dtype=np.int64)
    return _one_hot(table).transform(genes.reshape(len(encodings), -1))


def featurize(enc: ArchitectureEncoding, table: OperationTable = DEFAULT_TABLE) -> np.ndarray:
    return featurize_many([enc], table)[0]


# --- Archive --------------------------------------------------------------------------

@dataclass
class TrainingArchive:
    encodings: List[ArchitectureEncoding]
    values: np.ndarray
    minimize: bool
    metric_name: str

    def __len__(self):
        return len(self.encodings)

    @classmethod
    def from_records(cls, records: Iterable[FitnessRecord],
                     table: OperationTable = DEFAULT_TABLE) -> "TrainingArchive":
        """Archive of every record with a finite value; diverged MAE runs are left out."""
        kept = [r for r in records if math.isfinite(r.value)]
        if not kept:
            raise ArchiveTooSmallError("Archive holds no records with a finite value")
        for r in kept:
            validate_encoding(r.encoding, table)
        return cls(
            encodings=[r.encoding for r in kept],
            values=np.asarray([r.value for r in kept], dtype=float),
            minimize=kept[0].minimize,
            metric_name=kept[0].metric_name,
        )

    def subset(self, idx: Sequence[int]) -> "TrainingArchive":
        return TrainingArchive([self.encodings[i] for i in idx], self.values[np.asarray(idx)],
                               self.minimize, self.metric_name)

    def check_fittable(self, minimum: int = 2):
        if len(self) < minimum:
            raise ArchiveTooSmallError(f"Archive has {len(self)} records, needs at least {minimum}")
        if len(set(self.encodings)) < 2:
            raise ArchiveTooSmallError("Archive needs at least 2 distinct encodings")


def read_archive_records(path: Union[str, Path]) -> List[FitnessRecord]:
    """Diverged MAE runs are stored as Infinity, which only the json module reads back."""
    path = Path(path)
    if not path.exists():
        return []
    with path.open() as fh:
        return [FitnessRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def append_archive_record(path: Union[str, Path], record: FitnessRecord):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(json.dumps(record.to_dict()) + "\n")


def load_archive(path: Union[str, Path], table: OperationTable = DEFAULT_TABLE) -> TrainingArchive:
    return TrainingArchive.from_records(read_archive_records(path), table)


# --- Regressors -----------------------------------------------------------------------

class GridGaussianProcessRegressor(BaseEstimator, RegressorMixin):
    """RBF Gaussian process whose length-scale and noise come from a grid search on the
    log marginal likelihood (targets standardized)."""

    def __init__(self, length_scales=(0.5, 1.0, 2.0, 4.0), noise_levels=(1e-6, 1e-4, 1e-2)):
        self.length_scales = length_scales
        self.noise_levels = noise_levels

    def fit(self, X, y):
        best, best_lml = None, -np.inf
        for length_scale in self.length_scales:
            for noise in self.noise_levels:
                gp = GaussianProcessRegressor(
                    kernel=RBF(length_scale, length_scale_bounds="fixed"),
                    alpha=noise,
                    normalize_y=True,
                    optimizer=None,
                )
                try:
                    gp.fit(X, y)
                except np.linalg.LinAlgError:
                    continue
                if gp.log_marginal_likelihood_value_ > best_lml:
                    best, best_lml = gp, gp.log_marginal_likelihood_value_
        if best is None:
            raise np.linalg.LinAlgError("No grid point gave a positive-definite kernel matrix")
        self.gp_ = best
        self.length_scale_ = best.kernel_.length_scale
        self.noise_ = best.alpha
        self.log_marginal_likelihood_ = best_lml
        return self

    def predict(self, X):
        return self.gp_.predict(X)


def make_estimator(kind: str, seed: int = 0) -> BaseEstimator:
    if kind == "decision_tree":
        return DecisionTreeRegressor(max_depth=8, min_samples_leaf=2, random_state=seed)
    if kind == "random_forest":
        return RandomForestRegressor(n_estimators=100, max_features="sqrt", bootstrap=True,
                                     random_state=seed)
    if kind == "gaussian_process":
        return GridGaussianProcessRegressor()
    raise ValueError(f"Unknown surrogate kind '{kind}', expected one of {KINDS}")


@dataclass
class SurrogateModel:
    kind: str
    estimator: BaseEstimator
    minimize: bool
    metric_name: str
    table: OperationTable = DEFAULT_TABLE

    def predict(self, enc: ArchitectureEncoding) -> float:
        return float(self.predict_many([enc])[0])

    def predict_many(self, encodings: Sequence[ArchitectureEncoding]) -> np.ndarray:
        if not len(encodings):
            return np.zeros(0)
        return np.asarray(self.estimator.predict(featurize_many(encodings, self.table)), float)


def fit(kind: str, archive: TrainingArchive, seed: int = 0,
        estimator: Optional[BaseEstimator] = None) -> SurrogateModel:
    archive.check_fittable()
    estimator = estimator if estimator is not None else make_estimator(kind, seed)
    estimator.fit(featurize_many(archive.encodings), archive.values)
    return SurrogateModel(kind, estimator, archive.minimize, archive.metric_name)


def predict(model: SurrogateModel, enc: ArchitectureEncoding) -> float:
    return model.predict(enc)


# --- Quality metrics ------------------------------------------------------------------

def ktau(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Kendall tau-b; 0.0 when either side is constant."""
    if len(pred) != len(truth):
        raise LengthMismatchError(f"pred has {len(pred)} values, truth has {len(truth)}")
    if len(pred) < 2:
        raise LengthMismatchError("ktau needs at least 2 pairs")
    tau = kendalltau(np.asarray(pred, float), np.asarray(truth, float)).statistic
    return 0.0 if np.isnan(tau) else float(tau)


# --- Selection ------------------------------------------------------------------------

@dataclass
class SurrogateReport:
    cv_mse: Dict[str, Dict[str, float]]
    selected: str
    folds: int
    seed: int
    holdout_ktau: Optional[float] = None
    holdout_mse: Optional[float] = None
    extras: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "cv_mse": self.cv_mse,
            "selected": self.selected,
            "folds": self.folds,
            "seed": self.seed,
            "holdout_ktau": self.holdout_ktau,
            "holdout_mse": self.holdout_mse,
            **self.extras,
        }


def cross_validated_mse(kind: str, archive: TrainingArchive, folds: int, seed: int) -> np.ndarray:
    cv = KFold(n_splits=folds, shuffle=True, random_state=seed)
    scores = cross_val_score(make_estimator(kind, seed), featurize_many(archive.encodings),
                             archive.values, cv=cv, scoring="neg_mean_squared_error")
    return -scores


def select_best(archive: TrainingArchive, folds: int = 5, seed: int = 0,
                kinds: Sequence[str] = KINDS) -> Tuple[SurrogateModel, SurrogateReport]:
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    if len(archive) < folds:
        raise ArchiveTooSmallError(f"Archive has {len(archive)} records, fewer than {folds} folds")
    archive.check_fittable()

    cv_mse = {}
    for kind in sorted(kinds):
        mse = cross_validated_mse(kind, archive, folds, seed)
        cv_mse[kind] = {"mean": float(mse.mean()), "std": float(mse.std())}
    # min keeps the first of equal means, and kinds are iterated by name
    selected = min(cv_mse, key=lambda k: cv_mse[k]["mean"])
    return fit(selected, archive, seed), SurrogateReport(cv_mse, selected, folds, seed)


def holdout_scores(kind: str, archive: TrainingArchive, fraction: float = 0.2,
                   seed: int = 0) -> Dict[str, float]:
    """Fit `kind` on a random (1 - fraction) slice, score KTau/MSE on the rest (at least 2 points)."""
    idx = np.arange(len(archive))
    test_size = max(2, int(round(fraction * len(archive))))
    if len(archive) - test_size < 2:
        raise ArchiveTooSmallError(f"Archive has {len(archive)} records, too few for a holdout")
    train_idx, test_idx = train_test_split(idx, test_size=test_size, random_state=seed)
    model = fit(kind, archive.subset(train_idx), seed)
    test = archive.subset(test_idx)
    pred = model.predict_many(test.encodings)
    return {
        "ktau": ktau(pred, test.values),
        "mse": float(mean_squared_error(test.values, pred)),
        "holdout_size": int(len(test_idx)),
    }


def compare_surrogates(archive: TrainingArchive, holdout_fraction: float = 0.1, runs: int = 10,
                       seed: int = 0, kinds: Sequence[str] = KINDS) -> pd.DataFrame:
    rows = []
    for kind in sorted(kinds):
        scores = [holdout_scores(kind, archive, holdout_fraction, seed + r) for r in range(runs)]
        mse = np.asarray([s["mse"] for s in scores])
        tau = np.asarray([s["ktau"] for s in scores])
        rows.append({"kind": kind, "mse_mean": mse.mean(), "mse_std": mse.std(),
                     "ktau_mean": tau.mean(), "ktau_std": tau.std()})
    return pd.DataFrame(rows)


# --- Persistence ----------------------------------------------------------------------

def save_surrogate(model: SurrogateModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump({
        "format_version": SURROGATE_VERSION,
        "kind": model.kind,
        "minimize": model.minimize,
        "metric_name": model.metric_name,
        "estimator": model.estimator,
        "table": model.table,
    }, path)
    return path


def load_surrogate(path: Union[str, Path]) -> SurrogateModel:
    payload = joblib.load(Path(path))
    if not isinstance(payload, dict) or payload.get("format_version") != SURROGATE_VERSION:
        raise ValueError(f"Unsupported surrogate file {path}")
    return SurrogateModel(payload["kind"], payload["estimator"], payload["minimize"],
                          payload["metric_name"], payload["table"])
