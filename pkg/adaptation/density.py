"""Label density map estimation from confident predictions.

Every confident prediction spreads one unit of probability over the grid
according to its instance-label distribution (centre = prediction, scale =
calibrated sigma). The map is the sum divided by the number of predictions;
mass outside [y0, ym] is dropped.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from adaptation.base import ErrorDistribution, get_distribution
from adaptation.calibration import sigma_of
from common.errors import DataError, ShapeError
from common.logger import get_logger
from common.models import (ErrorModel, GridSpec, LabelDensityMap,
                           UncertainPrediction, stack_predictions)

logger = get_logger("density")

OUT_OF_RANGE_SIGMAS = 6.0
RANGE_PAD_SIGMAS = 3.0


def cell_mass(mu: float, sigma: float, cell_lo: float, cell_hi: float,
              distribution: str | ErrorDistribution = "gaussian") -> float:
    """Probability that the label lies in [cell_lo, cell_hi)."""
    return get_distribution(distribution).cell_mass(mu, sigma, cell_lo, cell_hi)


def default_grid_spec(predictions: np.ndarray, sigmas: np.ndarray, cells: int = 100) -> GridSpec:
    """[min - 3 max_sigma, max + 3 max_sigma] per dimension, split into ``cells``."""
    predictions = np.atleast_2d(predictions)
    sigmas = np.atleast_2d(sigmas)
    pad = RANGE_PAD_SIGMAS * sigmas.max(axis=0)
    lo = predictions.min(axis=0) - pad
    hi = predictions.max(axis=0) + pad
    hi = np.where(hi > lo, hi, lo + 1.0)
    return GridSpec.from_cells(lo, hi, cells)


def _dimension_masses(dist: ErrorDistribution, spec: GridSpec, pred: np.ndarray,
                      sigma: np.ndarray, d: int) -> np.ndarray:
    """(K, J_d) per-cell masses along dimension d; cdf differences telescope."""
    cdf = dist.cdf(spec.edges(d)[None, :], pred[:, d, None], sigma[:, d, None])
    return np.diff(cdf, axis=1)


def _accumulate(dist: ErrorDistribution, spec: GridSpec, pred: np.ndarray,
                sigma: np.ndarray) -> np.ndarray:
    if pred.shape[0] == 0:
        return np.zeros(spec.shape)
    masses = [_dimension_masses(dist, spec, pred, sigma, d) for d in range(spec.dims)]
    if spec.dims == 1:
        return masses[0].sum(axis=0)
    # independent dimensions: joint cell mass is the product of marginals
    return np.einsum("ki,kj->ij", masses[0], masses[1])


def build_map(confident: Sequence[UncertainPrediction], error_model: ErrorModel,
              spec: GridSpec, distribution: str | ErrorDistribution = "gaussian",
              workers: int = 1) -> LabelDensityMap:
    if not confident:
        raise DataError("cannot build a density map from an empty confident set")
    pred, unc = stack_predictions(list(confident))
    if pred.shape[1] != spec.dims:
        raise ShapeError(f"predictions have {pred.shape[1]} dims, grid has {spec.dims}")
    # canonical order makes the map independent of input ordering
    order = np.lexsort(tuple(unc.T[::-1]) + tuple(pred.T[::-1]))
    pred, unc = pred[order], unc[order]
    sigma = np.atleast_2d(sigma_of(error_model, unc))
    dist = get_distribution(distribution)

    y0, ym = np.asarray(spec.y0), np.asarray(spec.ym)
    outside = np.any((pred < y0 - OUT_OF_RANGE_SIGMAS * sigma)
                     | (pred > ym + OUT_OF_RANGE_SIGMAS * sigma), axis=1)
    if outside.any():
        logger.warning(f"{int(outside.sum())} confident predictions lie more than "
                       f"{OUT_OF_RANGE_SIGMAS:g} sigma outside the grid range")

    K = pred.shape[0]
    if workers > 1 and K > 1:
        parts = np.array_split(np.arange(K), min(workers, K))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(lambda rows: _accumulate(dist, spec, pred[rows], sigma[rows]),
                                     parts))
        acc = np.sum(partials, axis=0)
    else:
        acc = _accumulate(dist, spec, pred, sigma)

    density_map = LabelDensityMap(spec=spec, densities=acc / K, normalizer=float(K), count=K)
    logger.info(f"Density map: {K} confident predictions, cells={spec.cells}, "
                f"in-range mass={density_map.total_mass:.4f}")
    return density_map


def build_reference_map(labels, spec: GridSpec) -> LabelDensityMap:
    """Indicator histogram of true labels, normalized by the label count."""
    labels = np.asarray(labels, dtype=float)
    if labels.ndim == 1:
        labels = labels.reshape(-1, 1)
    if labels.shape[0] == 0:
        raise DataError("cannot build a reference map from no labels")
    if labels.shape[1] != spec.dims:
        raise ShapeError(f"labels have {labels.shape[1]} dims, grid has {spec.dims}")
    idx = np.floor((labels - np.asarray(spec.y0)) / np.asarray(spec.g)).astype(int)
    inside = np.all((idx >= 0) & (idx < np.asarray(spec.cells)), axis=1)
    counts = np.zeros(spec.shape)
    np.add.at(counts, tuple(idx[inside].T), 1.0)
    K = labels.shape[0]
    return LabelDensityMap(spec=spec, densities=counts / K, normalizer=float(K), count=K)


def uniform_map(spec: GridSpec, level: float = 1.0) -> LabelDensityMap:
    """Constant strictly positive map; a prior that carries no information."""
    return LabelDensityMap(spec=spec, densities=np.full(spec.shape, float(level)),
                           normalizer=1.0, count=0)


def map_mae(estimated: LabelDensityMap, reference: LabelDensityMap) -> float:
    if estimated.spec != reference.spec:
        raise ShapeError("density maps are defined on different grids")
    return float(np.mean(np.abs(estimated.densities - reference.densities)))
