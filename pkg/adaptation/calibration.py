"""Confidence classifier and uncertainty -> error-sigma calibration.

Both are fit on held-out labeled source data and applied per label
dimension.
"""
from typing import Sequence

import numpy as np

from common.errors import ConfigurationError, DataError, DegenerateFitError
from common.logger import get_logger
from common.models import (ConfidenceThreshold, ErrorModel, SplitSets,
                           UncertainPrediction, stack_predictions)
from config.settings import SIGMA_FLOOR

logger = get_logger("calibration")

MIN_THRESHOLD_SAMPLES = 10
ERROR_PERCENTILE = 68.0


def compute_threshold(source_uncertainties, eta: float = 0.9) -> ConfidenceThreshold:
    """tau = empirical eta-quantile of source uncertainties, per dimension."""
    if not 0 < eta <= 1:
        raise ConfigurationError(f"eta must be in (0, 1], got {eta}")
    u = np.asarray(source_uncertainties, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, 1)
    if u.size == 0:
        raise DataError("no source uncertainties to derive a threshold from")
    if u.shape[0] < MIN_THRESHOLD_SAMPLES:
        raise DataError(f"need >= {MIN_THRESHOLD_SAMPLES} source uncertainties, got {u.shape[0]}")
    tau = np.quantile(u, eta, axis=0, method="linear")
    if np.any(tau <= 0):
        raise DataError("threshold is zero: source uncertainties are all zero (dropout disabled?)")
    return ConfidenceThreshold(tau=tuple(tau.tolist()), eta=eta)


def classify(predictions: Sequence[UncertainPrediction],
             threshold: ConfidenceThreshold) -> SplitSets:
    """Confident iff uncertainty <= tau in every dimension."""
    tau = np.asarray(threshold.tau)
    confident, uncertain = [], []
    for p in predictions:
        if np.all(np.asarray(p.uncertainty) <= tau):
            confident.append(p)
        else:
            uncertain.append(p)
    return SplitSets(confident=confident, uncertain=uncertain)


def fit_line(u_points, e_points) -> tuple[float, float]:
    """Closed-form least squares e = a0 + a1 * u."""
    u = np.asarray(u_points, dtype=float)
    e = np.asarray(e_points, dtype=float)
    q = len(u)
    u_bar, e_bar = u.mean(), e.mean()
    denom = np.sum(u ** 2) - q * u_bar ** 2
    if denom <= 1e-12 * max(1.0, float(np.sum(u ** 2))):
        raise DegenerateFitError("segment mean uncertainties have zero variance")
    a1 = (np.sum(u * e) - q * u_bar * e_bar) / denom
    a0 = e_bar - a1 * u_bar
    return float(a0), float(a1)


def _segment_points(u: np.ndarray, err: np.ndarray, segments: int) -> tuple[np.ndarray, np.ndarray]:
    # ties in u broken by error so the result ignores input order
    order = np.lexsort((err, u))
    chunks = np.array_split(order, segments)
    u_s = np.array([u[c].mean() for c in chunks])
    e_s = np.array([np.percentile(err[c], ERROR_PERCENTILE) for c in chunks])
    return u_s, e_s


def fit_error_model(source_predictions: Sequence[UncertainPrediction], source_labels,
                    segments: int = 40) -> ErrorModel:
    """Fit sigma = a0 + a1 * u over equal-count uncertainty segments.

    Each segment contributes (mean uncertainty, 68th percentile of absolute
    error), so about 68% of source predictions fall within sigma.
    """
    if segments < 2:
        raise ConfigurationError(f"need at least 2 segments, got {segments}")
    pred, unc = stack_predictions(list(source_predictions))
    labels = np.asarray(source_labels, dtype=float)
    if labels.ndim == 1:
        labels = labels.reshape(-1, 1)
    if pred.shape[0] < segments:
        raise DataError(f"{pred.shape[0]} samples cannot fill {segments} segments")
    if labels.shape != pred.shape:
        raise DataError(f"labels shape {labels.shape} != predictions shape {pred.shape}")

    a0, a1 = [], []
    for d in range(pred.shape[1]):
        err = np.abs(pred[:, d] - labels[:, d])
        u_s, e_s = _segment_points(unc[:, d], err, segments)
        b0, b1 = fit_line(u_s, e_s)
        a0.append(b0)
        a1.append(b1)
        if b1 <= 0:
            logger.warning(f"dim {d}: non-positive slope a1={b1:.4g}; uncertainty does not track error")
    model = ErrorModel(a0=tuple(a0), a1=tuple(a1), segments=segments)
    logger.info(f"Error model fitted on {pred.shape[0]} samples, q={segments}: "
                f"a0={[round(v, 5) for v in a0]} a1={[round(v, 5) for v in a1]}")
    return model


def sigma_of(error_model: ErrorModel, u):
    """max(a0 + a1 * u, SIGMA_FLOOR); u broadcasts over the last (label) axis."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0):
        raise DataError("uncertainty must be non-negative")
    sigma = np.maximum(np.asarray(error_model.a0) + np.asarray(error_model.a1) * u_arr, SIGMA_FLOOR)
    if u_arr.ndim == 0 and error_model.dims == 1:
        return float(sigma[0])
    return sigma
