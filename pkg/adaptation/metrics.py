"""Regression metrics: MSE, MAE and RMSLE."""
from typing import Optional

import numpy as np

from common.errors import DataError, ShapeError
from common.models import Dataset, Metrics
from model.regressor import Regressor, forward


def compute_metrics(predictions, labels) -> Metrics:
    pred = np.asarray(predictions, dtype=float)
    true = np.asarray(labels, dtype=float)
    if pred.ndim == 1:
        pred = pred.reshape(-1, 1)
    if true.ndim == 1:
        true = true.reshape(-1, 1)
    if pred.shape != true.shape:
        raise ShapeError(f"predictions {pred.shape} vs labels {true.shape}")
    if pred.size == 0:
        raise DataError("no examples to evaluate")
    diff = pred - true
    # log(1 + v) needs v > -1 on both sides
    defined = bool(np.all(pred > -1) and np.all(true > -1))
    rmsle = float(np.sqrt(np.mean((np.log1p(pred) - np.log1p(true)) ** 2))) if defined else None
    return Metrics(mse=float(np.mean(diff ** 2)), mae=float(np.mean(np.abs(diff))),
                   rmsle=rmsle, rmsle_defined=defined, count=int(pred.shape[0]))


def evaluate(model: Regressor, data: Dataset) -> Metrics:
    if data.labels is None:
        raise DataError(f"dataset {data.tag!r} has no labels to evaluate against")
    return compute_metrics(forward(model, data.features), data.labels)


def relative_reduction(before: Optional[float], after: Optional[float]) -> Optional[float]:
    """Percentage drop from ``before`` to ``after``."""
    if before is None or after is None or before == 0:
        return None
    return 100.0 * (before - after) / before
