"""Core Pydantic models for TASFAR adaptation."""
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from common.errors import ConfigurationError, ShapeError


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    return arr


def _frozen_array(value) -> np.ndarray:
    arr = np.array(value, dtype=float)
    arr.setflags(write=False)
    return arr


# ── Predictions ───────────────────────────────────────────────────────────────

class UncertainPrediction(BaseModel):
    model_config = ConfigDict(frozen=True)

    prediction: tuple[float, ...]
    uncertainty: tuple[float, ...]
    input_index: int = 0

    @model_validator(mode="after")
    def _check(self):
        if len(self.prediction) != len(self.uncertainty):
            raise ValueError("prediction and uncertainty lengths differ")
        if any(u < 0 for u in self.uncertainty):
            raise ValueError("uncertainty must be non-negative")
        return self

    @property
    def dims(self) -> int:
        return len(self.prediction)

    def component(self, d: int) -> "UncertainPrediction":
        return UncertainPrediction(prediction=(self.prediction[d],),
                                   uncertainty=(self.uncertainty[d],),
                                   input_index=self.input_index)


def stack_predictions(predictions: list[UncertainPrediction]) -> tuple[np.ndarray, np.ndarray]:
    """Return (predictions, uncertainties) as (n, m) arrays."""
    if not predictions:
        return np.empty((0, 0)), np.empty((0, 0))
    pred = np.array([p.prediction for p in predictions], dtype=float)
    unc = np.array([p.uncertainty for p in predictions], dtype=float)
    return pred, unc


class TrainingBatch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray

    @field_validator("inputs", "targets", mode="before")
    @classmethod
    def _matrix(cls, v):
        return _as_matrix(v)

    @field_validator("weights", mode="before")
    @classmethod
    def _vector(cls, v):
        return np.asarray(v, dtype=float).reshape(-1)

    @model_validator(mode="after")
    def _check(self):
        n = self.inputs.shape[0]
        if self.targets.shape[0] != n or self.weights.shape[0] != n:
            raise ShapeError(
                f"row counts differ: inputs={n} targets={self.targets.shape[0]} "
                f"weights={self.weights.shape[0]}")
        if np.any(self.weights < 0):
            raise ConfigurationError("loss weights must be non-negative")
        return self

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


# ── Calibration ───────────────────────────────────────────────────────────────

class ConfidenceThreshold(BaseModel):
    model_config = ConfigDict(frozen=True)

    tau: tuple[float, ...]
    eta: float

    @model_validator(mode="after")
    def _check(self):
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        if any(t <= 0 for t in self.tau):
            raise ValueError("tau must be positive")
        return self

    def component(self, d: int) -> "ConfidenceThreshold":
        return ConfidenceThreshold(tau=(self.tau[d],), eta=self.eta)


class ErrorModel(BaseModel):
    """Linear uncertainty -> error-sigma curve, one (a0, a1) per label dimension."""
    model_config = ConfigDict(frozen=True)

    a0: tuple[float, ...]
    a1: tuple[float, ...]
    segments: int = Field(ge=2)

    @model_validator(mode="after")
    def _check(self):
        if len(self.a0) != len(self.a1):
            raise ValueError("a0 and a1 lengths differ")
        return self

    @property
    def dims(self) -> int:
        return len(self.a0)

    def component(self, d: int) -> "ErrorModel":
        return ErrorModel(a0=(self.a0[d],), a1=(self.a1[d],), segments=self.segments)


class SplitSets(BaseModel):
    model_config = ConfigDict(frozen=True)

    confident: list[UncertainPrediction] = []
    uncertain: list[UncertainPrediction] = []


# ── Density map ───────────────────────────────────────────────────────────────

class GridSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    y0: tuple[float, ...]
    ym: tuple[float, ...]
    g: tuple[float, ...]

    @model_validator(mode="after")
    def _check(self):
        if not (len(self.y0) == len(self.ym) == len(self.g)):
            raise ValueError("y0, ym and g must have the same length")
        if self.dims not in (1, 2):
            raise ValueError(f"density maps support 1 or 2 label dimensions, got {self.dims}")
        for lo, hi, g in zip(self.y0, self.ym, self.g):
            if not hi > lo:
                raise ValueError(f"ym must exceed y0 ({hi} <= {lo})")
            if not g > 0:
                raise ValueError(f"grid size must be positive, got {g}")
        if min(self.cells) < 1:
            raise ValueError("grid size larger than the label range")
        return self

    @classmethod
    def from_cells(cls, y0, ym, cells) -> "GridSpec":
        y0 = tuple(float(v) for v in np.atleast_1d(y0))
        ym = tuple(float(v) for v in np.atleast_1d(ym))
        cells = np.broadcast_to(np.atleast_1d(cells), (len(y0),))
        g = tuple((hi - lo) / int(c) for lo, hi, c in zip(y0, ym, cells))
        return cls(y0=y0, ym=ym, g=g)

    @property
    def dims(self) -> int:
        return len(self.y0)

    @property
    def cells(self) -> tuple[int, ...]:
        # J = floor((ym - y0) / g); the epsilon absorbs range/g round-off
        return tuple(int(np.floor((hi - lo) / g + 1e-9))
                     for lo, hi, g in zip(self.y0, self.ym, self.g))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.cells

    def edges(self, d: int = 0) -> np.ndarray:
        return self.y0[d] + self.g[d] * np.arange(self.cells[d] + 1)

    def centers(self, d: int = 0) -> np.ndarray:
        return self.y0[d] + self.g[d] * (np.arange(self.cells[d]) + 0.5)


class LabelDensityMap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    spec: GridSpec
    densities: np.ndarray
    normalizer: float = Field(gt=0)
    count: int = Field(ge=0)

    @field_validator("densities", mode="before")
    @classmethod
    def _freeze(cls, v):
        return _frozen_array(v)

    @model_validator(mode="after")
    def _check(self):
        if self.densities.shape != self.spec.shape:
            raise ShapeError(f"densities shape {self.densities.shape} != grid {self.spec.shape}")
        if np.any(self.densities < 0):
            raise ValueError("densities must be non-negative")
        return self

    @property
    def flat(self) -> np.ndarray:
        """Row-major flat view, cell index i."""
        return self.densities.reshape(-1)

    @property
    def total_mass(self) -> float:
        return float(self.densities.sum())

    @property
    def global_mean(self) -> float:
        return float(self.densities.mean())


# ── Pseudo-labels ─────────────────────────────────────────────────────────────

class LocalityWindow(BaseModel):
    model_config = ConfigDict(frozen=True)

    cell_indices: tuple[int, ...]
    local_mean_density: float
    global_mean_density: float

    def __len__(self) -> int:
        return len(self.cell_indices)


class PseudoLabel(BaseModel):
    model_config = ConfigDict(frozen=True)

    value: tuple[float, ...]
    credibility: float = Field(ge=0)
    source_index: int
    locality_cells: int = 0
    fallback: bool = False


class PseudoLabelFailure(BaseModel):
    source_index: int
    error: str


class PseudoLabelSet(BaseModel):
    labels: list[PseudoLabel] = []
    failures: list[PseudoLabelFailure] = []
    summary: dict = {}

    def __len__(self) -> int:
        return len(self.labels)


# ── Datasets ──────────────────────────────────────────────────────────────────

class Standardizer(BaseModel):
    """Per-feature z-score transform recorded at load time."""
    model_config = ConfigDict(frozen=True)

    mean: tuple[float, ...]
    scale: tuple[float, ...]
    zero_variance: tuple[bool, ...]

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        features = _as_matrix(features)
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        zero = std == 0
        scale = np.where(zero, 1.0, std)
        return cls(mean=tuple(mean.tolist()), scale=tuple(scale.tolist()),
                   zero_variance=tuple(bool(z) for z in zero))

    def apply(self, features: np.ndarray) -> np.ndarray:
        features = _as_matrix(features)
        if features.shape[1] != len(self.mean):
            raise ShapeError(f"transform fitted on {len(self.mean)} features, got {features.shape[1]}")
        return (features - np.asarray(self.mean)) / np.asarray(self.scale)

    def inverse(self, features: np.ndarray) -> np.ndarray:
        features = _as_matrix(features)
        return features * np.asarray(self.scale) + np.asarray(self.mean)


class Dataset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray
    labels: Optional[np.ndarray] = None
    tag: str = ""
    feature_names: list[str] = []
    label_names: list[str] = []
    dropped_rows: int = 0
    transform: Optional[Standardizer] = None

    @field_validator("features", mode="before")
    @classmethod
    def _features(cls, v):
        return _frozen_array(_as_matrix(v))

    @field_validator("labels", mode="before")
    @classmethod
    def _labels(cls, v):
        return None if v is None else _frozen_array(_as_matrix(v))

    @model_validator(mode="after")
    def _check(self):
        if self.labels is not None and self.labels.shape[0] != self.features.shape[0]:
            raise ShapeError(f"labels rows {self.labels.shape[0]} != features rows {self.features.shape[0]}")
        if not self.feature_names:
            object.__setattr__(self, "feature_names",
                               [f"x{i}" for i in range(self.features.shape[1])])
        if self.labels is not None and not self.label_names:
            object.__setattr__(self, "label_names",
                               [f"y{i}" for i in range(self.labels.shape[1])])
        return self

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def subset(self, rows, tag: Optional[str] = None) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            features=self.features[rows],
            labels=None if self.labels is None else self.labels[rows],
            tag=self.tag if tag is None else tag,
            feature_names=self.feature_names,
            label_names=self.label_names,
            transform=self.transform,
        )

    def without_labels(self) -> "Dataset":
        return Dataset(features=self.features, tag=self.tag,
                       feature_names=self.feature_names, transform=self.transform)

    def raw_features(self) -> np.ndarray:
        if self.transform is None:
            return np.array(self.features)
        return self.transform.inverse(self.features)


# ── Reports ───────────────────────────────────────────────────────────────────

class Metrics(BaseModel):
    mse: float
    mae: float
    rmsle: Optional[float] = None
    rmsle_defined: bool = True
    count: int


class RunReport(BaseModel):
    method: str
    metrics: dict[str, dict[str, Metrics]] = {}
    split_sizes: dict[str, int] = {}
    uncertain_ratio: float = 0.0
    uncertain_error_ratio: Optional[float] = None
    beta_accuracy_correlation: Optional[float] = None
    beta_summary: dict[str, float] = {}
    fallback_fraction: float = 0.0
    pseudo_label_failures: int = 0
    calibration: dict = {}
    loss_history: list[float] = []
    early_stop_epoch: Optional[int] = None
    reductions: dict[str, Optional[float]] = {}
    config: dict = {}
    artifacts: dict[str, str] = {}
    created_at: str = ""
