"""Parameter sweeps over grid size, segment count, threshold ratio and error distribution.

One set of MC-dropout predictions is reused for every setting, so the tables
isolate the effect of each parameter on the density map and the pseudo-labels.
"""
from typing import Sequence

import numpy as np
import pandas as pd

from adaptation.calibration import classify, compute_threshold, fit_error_model, sigma_of
from adaptation.density import build_map, build_reference_map, map_mae
from adaptation.pipeline import (SEED_CALIBRATION, SEED_TARGET, build_density_maps,
                                 grid_spec_for, label_uncertain, stage_seeds)
from adaptation.pseudolabel import beta_accuracy_correlation
from common.errors import DataError
from common.logger import get_logger, new_run_id
from common.models import (ConfidenceThreshold, Dataset, ErrorModel, SplitSets,
                           stack_predictions)
from config.adaptation import AdaptationConfig
from model.regressor import Regressor, mc_predict_batch

logger = get_logger("sweep")


def _label_errors(split: SplitSets, error_model: ErrorModel, threshold: ConfidenceThreshold,
                  config: AdaptationConfig, truth: np.ndarray) -> dict:
    maps = build_density_maps(split.confident, error_model, config)
    pseudo = label_uncertain(maps, split.uncertain, error_model, threshold, config)
    by_index = {p.input_index: p for p in split.uncertain}
    labels = pseudo.labels
    if not labels:
        return {"fallback_fraction": None, "pseudo_label_failures": len(pseudo.failures)}
    rows = [l.source_index for l in labels]
    values = np.array([l.value for l in labels])
    source, _ = stack_predictions([by_index[i] for i in rows])
    return {
        "pseudo_label_mae": float(np.abs(values - truth[rows]).mean()),
        "source_mae": float(np.abs(source - truth[rows]).mean()),
        "fallback_fraction": pseudo.summary["fallback_fraction"],
        "beta_correlation": beta_accuracy_correlation(labels, [by_index[i] for i in rows], truth[rows]),
    }


def _map_errors(split: SplitSets, error_model: ErrorModel, config: AdaptationConfig,
                truth: np.ndarray) -> dict:
    """Estimated vs label-histogram map over the confident set, averaged over label dims."""
    mae, l1, widths = [], [], []
    pred, unc = stack_predictions(split.confident)
    rows = [p.input_index for p in split.confident]
    for d in range(pred.shape[1]):
        em = error_model.component(d)
        spec = grid_spec_for(pred[:, [d]], sigma_of(em, unc[:, [d]]), config)
        estimated = build_map([p.component(d) for p in split.confident], em, spec, config.distribution)
        reference = build_reference_map(truth[rows][:, [d]], spec)
        mae.append(map_mae(estimated, reference))
        l1.append(float(np.abs(estimated.densities - reference.densities).sum()))
        widths.append(spec.g[0])
    return {"grid_size": float(np.mean(widths)), "map_mae": float(np.mean(mae)),
            "map_l1": float(np.mean(l1))}


def sweep(source_model: Regressor, target: Dataset, calibration: Dataset,
          config: AdaptationConfig,
          grid_cells: Sequence[int] = (200, 100, 50, 20),
          segments: Sequence[int] = (10, 20, 40, 80),
          etas: Sequence[float] = (0.5, 0.7, 0.8, 0.9, 0.95),
          distributions: Sequence[str] = ("gaussian", "laplace")) -> dict[str, pd.DataFrame]:
    """Return tables ``grid``, ``segments`` and ``eta``; needs labeled target data."""
    new_run_id()
    if target.labels is None or calibration.labels is None:
        raise DataError("sweeps measure errors and need labeled target and calibration data")
    seeds = stage_seeds(config.seed)
    model = source_model.with_dropout(config.dropout_rate)
    cal_preds = mc_predict_batch(model, calibration.features, config.samplings_S,
                                 seeds[SEED_CALIBRATION], config.workers)
    target_preds = mc_predict_batch(model, target.features, config.samplings_S,
                                    seeds[SEED_TARGET], config.workers)
    _, cal_unc = stack_predictions(cal_preds)
    truth = np.asarray(target.labels)

    threshold = compute_threshold(cal_unc, config.eta)
    error_model = fit_error_model(cal_preds, calibration.labels, config.segments_q)
    split = classify(target_preds, threshold)
    if not split.confident or not split.uncertain:
        raise DataError("default threshold leaves one side of the confidence split empty")

    grid_rows = []
    for cells in grid_cells:
        for dist in distributions:
            cfg = config.updated(grid_cells=int(cells), grid_size=None, distribution=dist)
            row = {"grid_cells": int(cells), "distribution": dist}
            row.update(_map_errors(split, error_model, cfg, truth))
            row.update(_label_errors(split, error_model, threshold, cfg, truth))
            grid_rows.append(row)
    logger.info(f"Grid sweep: {len(grid_rows)} settings")

    segment_rows = []
    for q in segments:
        if q > len(cal_preds):
            logger.warning(f"Skipping q={q}: only {len(cal_preds)} calibration rows")
            continue
        em = fit_error_model(cal_preds, calibration.labels, int(q))
        row = {"segments_q": int(q), "a0": em.a0[0], "a1": em.a1[0]}
        row.update(_label_errors(split, em, threshold, config, truth))
        segment_rows.append(row)
    logger.info(f"Segment sweep: {len(segment_rows)} settings")

    eta_rows = []
    for eta in etas:
        thr = compute_threshold(cal_unc, float(eta))
        sp = classify(target_preds, thr)
        row = {"eta": float(eta), "tau": thr.tau[0],
               "uncertain_ratio": len(sp.uncertain) / len(target_preds)}
        if sp.confident and sp.uncertain:
            row.update(_label_errors(sp, error_model, thr, config, truth))
        eta_rows.append(row)
    logger.info(f"Eta sweep: {len(eta_rows)} settings")

    return {"grid": pd.DataFrame(grid_rows), "segments": pd.DataFrame(segment_rows),
            "eta": pd.DataFrame(eta_rows)}
