"""Pseudo-label generator.

For an uncertain prediction the density map acts as a prior and the
instance-label distribution as a likelihood; the pseudo-label is the
posterior-weighted mean of the grid cell centres inside the 3-sigma
locality window. The credibility weight grows with the prediction's
relative uncertainty (u / tau) and with the local label density
(local mean density / global mean density).
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from adaptation.base import ErrorDistribution, get_distribution
from adaptation.calibration import sigma_of
from common.errors import DataError, EmptyWindowError, NumericError, ShapeError, TasfarError
from common.logger import get_logger
from common.models import (ConfidenceThreshold, ErrorModel, LabelDensityMap,
                           LocalityWindow, PseudoLabel, PseudoLabelFailure,
                           PseudoLabelSet, UncertainPrediction, stack_predictions)
from config.settings import WINDOW_SIGMAS, WINDOW_UNDERFLOW

logger = get_logger("pseudolabel")

BETA_QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


# ── Locality window ───────────────────────────────────────────────────────────

def _window_axes(density_map: LabelDensityMap, prediction: np.ndarray,
                 sigma: np.ndarray) -> list[np.ndarray]:
    """Cell indices per dimension whose centres are strictly within 3 sigma (a box for m = 2)."""
    spec = density_map.spec
    if prediction.shape[0] != spec.dims:
        raise ShapeError(f"prediction has {prediction.shape[0]} dims, map has {spec.dims}")
    return [np.flatnonzero(np.abs(spec.centers(d) - prediction[d]) < WINDOW_SIGMAS * sigma[d])
            for d in range(spec.dims)]


def _flat_indices(density_map: LabelDensityMap, axes: list[np.ndarray]) -> np.ndarray:
    if len(axes) == 1:
        return axes[0]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.ravel_multi_index(tuple(grid), density_map.spec.shape).ravel()


def locality_window(density_map: LabelDensityMap, prediction, sigma) -> LocalityWindow:
    prediction = np.atleast_1d(np.asarray(prediction, dtype=float))
    sigma = np.broadcast_to(np.atleast_1d(np.asarray(sigma, dtype=float)), prediction.shape)
    axes = _window_axes(density_map, prediction, sigma)
    cells = _flat_indices(density_map, axes) if all(len(a) for a in axes) else np.array([], dtype=int)
    local = float(density_map.flat[cells].mean()) if len(cells) else 0.0
    return LocalityWindow(cell_indices=tuple(int(c) for c in cells),
                          local_mean_density=local,
                          global_mean_density=density_map.global_mean)


def _window_terms(density_map: LabelDensityMap, prediction: np.ndarray, sigma: np.ndarray,
                  dist: ErrorDistribution):
    """(posterior per window cell, prior per window cell, centre coordinates per dim)."""
    spec = density_map.spec
    axes = _window_axes(density_map, prediction, sigma)
    if not all(len(a) for a in axes):
        raise EmptyWindowError("no cell centre within the locality window")
    masses = []
    for d, idx in enumerate(axes):
        edges = spec.edges(d)
        masses.append(np.atleast_1d(dist.cell_mass(prediction[d], sigma[d], edges[idx], edges[idx + 1])))
    if spec.dims == 1:
        likelihood = masses[0]
        centres = [spec.centers(0)[axes[0]]]
    else:
        likelihood = np.outer(masses[0], masses[1]).ravel()
        grid = np.meshgrid(spec.centers(0)[axes[0]], spec.centers(1)[axes[1]], indexing="ij")
        centres = [g.ravel() for g in grid]
    prior = density_map.densities[np.ix_(*axes)].ravel()
    return likelihood * prior, prior, centres


def posterior_cell_probs(density_map: LabelDensityMap, prediction, sigma,
                         distribution: str | ErrorDistribution = "gaussian") -> np.ndarray:
    """Unnormalized posterior Pr(y in Y_i) = likelihood mass x M(i) over window cells (row-major)."""
    prediction = np.atleast_1d(np.asarray(prediction, dtype=float))
    sigma = np.broadcast_to(np.atleast_1d(np.asarray(sigma, dtype=float)), prediction.shape)
    return _window_terms(density_map, prediction, sigma, get_distribution(distribution))[0]


# ── Generation ────────────────────────────────────────────────────────────────

def _fallback(prediction: UncertainPrediction, window_cells: int) -> PseudoLabel:
    return PseudoLabel(value=prediction.prediction, credibility=0.0,
                       source_index=prediction.input_index,
                       locality_cells=window_cells, fallback=True)


def generate(density_map: LabelDensityMap, prediction: UncertainPrediction,
             error_model: ErrorModel, threshold: ConfidenceThreshold,
             distribution: str | ErrorDistribution = "gaussian") -> PseudoLabel:
    p = np.asarray(prediction.prediction, dtype=float)
    u = np.asarray(prediction.uncertainty, dtype=float)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(u))):
        raise NumericError(f"non-finite prediction for input {prediction.input_index}")
    global_mean = density_map.global_mean
    if not global_mean > 0:
        raise DataError("density map is empty (global mean density is 0)")
    sigma = np.broadcast_to(np.atleast_1d(sigma_of(error_model, u)), p.shape)

    try:
        posterior, prior, centres = _window_terms(density_map, p, sigma, get_distribution(distribution))
    except EmptyWindowError:
        logger.debug(f"input {prediction.input_index}: empty locality window, keeping prediction")
        return _fallback(prediction, 0)

    total = float(posterior.sum())
    if not total >= WINDOW_UNDERFLOW:
        logger.debug(f"input {prediction.input_index}: window probability underflow, keeping prediction")
        return _fallback(prediction, len(prior))

    value = tuple(float(np.clip(np.dot(posterior, c) / total, c.min(), c.max())) for c in centres)
    local_gain = float(prior.mean()) / global_mean
    relative_uncertainty = float(np.mean(u / np.asarray(threshold.tau)))
    return PseudoLabel(value=value, credibility=local_gain * relative_uncertainty,
                       source_index=prediction.input_index, locality_cells=len(prior))


def generate_per_dimension(maps: Sequence[LabelDensityMap], prediction: UncertainPrediction,
                           error_model: ErrorModel, threshold: ConfidenceThreshold,
                           distribution: str | ErrorDistribution = "gaussian") -> PseudoLabel:
    """Independent 1-D generation per label dimension; beta is the mean of per-dimension betas."""
    parts = [generate(maps[d], prediction.component(d), error_model.component(d),
                      threshold.component(d), distribution)
             for d in range(prediction.dims)]
    return PseudoLabel(value=tuple(p.value[0] for p in parts),
                       credibility=float(np.mean([p.credibility for p in parts])),
                       source_index=prediction.input_index,
                       locality_cells=sum(p.locality_cells for p in parts),
                       fallback=any(p.fallback for p in parts))


def summarize(labels: Sequence[PseudoLabel], failures: int = 0) -> dict:
    summary = {"count": len(labels), "failures": failures,
               "fallback_fraction": (sum(l.fallback for l in labels) / len(labels)) if labels else 0.0}
    if labels:
        betas = np.array([l.credibility for l in labels])
        for q in BETA_QUANTILES:
            summary[f"beta_q{int(q * 100)}"] = float(np.quantile(betas, q))
    return summary


def generate_all(density_map: LabelDensityMap | Sequence[LabelDensityMap],
                 uncertain: Sequence[UncertainPrediction], error_model: ErrorModel,
                 threshold: ConfidenceThreshold,
                 distribution: str | ErrorDistribution = "gaussian",
                 workers: int = 1) -> PseudoLabelSet:
    """Generate for every uncertain prediction, in input order.

    ``density_map`` may be one map over all label dimensions or a list of
    1-D maps, one per dimension. Per-item errors become failure records.
    """
    dist = get_distribution(distribution)
    per_dimension = not isinstance(density_map, LabelDensityMap)

    def one(p: UncertainPrediction):
        try:
            if per_dimension:
                return generate_per_dimension(density_map, p, error_model, threshold, dist)
            return generate(density_map, p, error_model, threshold, dist)
        except TasfarError as e:
            return PseudoLabelFailure(source_index=p.input_index, error=str(e))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, uncertain))
    else:
        results = [one(p) for p in uncertain]

    labels = [r for r in results if isinstance(r, PseudoLabel)]
    failures = [r for r in results if isinstance(r, PseudoLabelFailure)]
    for f in failures:
        logger.error(f"Pseudo-label failed for input {f.source_index}: {f.error}")
    summary = summarize(labels, len(failures))
    if labels:
        logger.info(f"Pseudo-labels: {len(labels)} generated, "
                    f"fallback={summary['fallback_fraction']:.3f}, "
                    f"beta median={summary['beta_q50']:.3f} max={summary['beta_q100']:.3f}")
    return PseudoLabelSet(labels=labels, failures=failures, summary=summary)


def beta_accuracy_correlation(labels: Sequence[PseudoLabel],
                              predictions: Sequence[UncertainPrediction],
                              truth) -> Optional[float]:
    """Pearson correlation between beta and error reduction (source error - pseudo-label error).

    ``truth`` rows align with ``labels`` / ``predictions``.
    """
    if len(labels) < 2:
        return None
    truth = np.asarray(truth, dtype=float).reshape(len(labels), -1)
    values = np.array([l.value for l in labels])
    source, _ = stack_predictions(list(predictions))
    reduction = (np.abs(source - truth).mean(axis=1) - np.abs(values - truth).mean(axis=1))
    betas = np.array([l.credibility for l in labels])
    if np.ptp(betas) == 0 or np.ptp(reduction) == 0:
        return None
    return float(stats.pearsonr(betas, reduction)[0])
