"""
TASFAR pipeline: source-free adaptation of a regressor.

Этапы (строго по порядку, граница этапа: барьер):
  1. MC-dropout на калибровочных данных источника → τ и Q_s
  2. MC-dropout на целевых данных → confident / uncertain
  3. Карта плотности меток по confident-предсказаниям
  4. Псевдо-метки и доверие β для uncertain
  5. Дообучение без dropout: uncertain с весом β, confident с детерминированным
     выходом модели и весом 1 (веса нормированы к среднему 1)
  6. Отчёт (метрики до/после, β-диагностика, история потерь)

Target labels, when present, are used only for the report.
"""
from datetime import datetime, timezone
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from adaptation.calibration import classify, compute_threshold, fit_error_model, sigma_of
from adaptation.density import build_map, default_grid_spec, uniform_map
from adaptation.metrics import compute_metrics, evaluate, relative_reduction
from adaptation.pseudolabel import beta_accuracy_correlation, generate_all, summarize
from common.errors import ConfigurationError, DataError, NumericDivergenceError, PipelineError
from common.logger import get_logger, new_run_id
from common.models import (ConfidenceThreshold, Dataset, ErrorModel, GridSpec,
                           LabelDensityMap, PseudoLabel, PseudoLabelSet, RunReport,
                           SplitSets, UncertainPrediction, stack_predictions)
from config.adaptation import AdaptationConfig
from config.settings import REFERENCE_MSE_REDUCTION_PCT, REFERENCE_RMSLE_REDUCTION_PCT
from model.regressor import (Regressor, forward, init_regressor, make_batches,
                             mc_predict_batch, train)

logger = get_logger("pipeline")

# independent seeds drawn from config.seed, one per random stage
SEED_CALIBRATION, SEED_TARGET, SEED_BATCHES, SEED_TRAIN, SEED_TEST = range(5)


class AdaptationOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    target_model: Regressor
    report: RunReport
    pseudo_labels: PseudoLabelSet
    density_maps: list[LabelDensityMap] = []
    target_predictions: list[UncertainPrediction] = []
    split: SplitSets
    test_predictions: list[UncertainPrediction] = []
    test_split: Optional[SplitSets] = None
    threshold: ConfidenceThreshold
    error_model: ErrorModel


def stage_seeds(seed: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(5)]


def early_stop_check(loss_history: Sequence[float], window: int = 20, ratio: float = 0.1) -> bool:
    """Stop once the mean per-epoch drop over the last ``window`` epochs falls
    below ``ratio`` x the mean drop over the first ``window`` epochs."""
    if window < 2:
        raise ConfigurationError(f"early-stop window must be >= 2, got {window}")
    if len(loss_history) < 2 * window:
        return False
    initial = (loss_history[0] - loss_history[window]) / window
    recent = (loss_history[-1 - window] - loss_history[-1]) / window
    if initial <= 0:
        return True  # loss never dropped
    return recent < ratio * initial


# ── Stages ────────────────────────────────────────────────────────────────────

def calibrate(model: Regressor, calibration: Dataset, config: AdaptationConfig,
              seed: int) -> tuple[ConfidenceThreshold, ErrorModel]:
    if calibration.labels is None:
        raise DataError("source calibration data must carry labels")
    preds = mc_predict_batch(model, calibration.features, config.samplings_S, seed, config.workers)
    _, unc = stack_predictions(preds)
    threshold = compute_threshold(unc, config.eta)
    error_model = fit_error_model(preds, calibration.labels, config.segments_q)
    logger.info(f"Calibration on {len(calibration)} source rows: tau={[round(t, 5) for t in threshold.tau]} "
                f"(eta={config.eta})")
    return threshold, error_model


def grid_spec_for(pred: np.ndarray, sigma: np.ndarray, config: AdaptationConfig) -> GridSpec:
    spec = default_grid_spec(pred, sigma, config.grid_cells)
    if config.grid_size is None:
        return spec
    g = np.broadcast_to(np.asarray(config.grid_size, dtype=float), (spec.dims,))
    try:
        return GridSpec(y0=spec.y0, ym=spec.ym, g=tuple(g.tolist()))
    except ValidationError as e:
        raise ConfigurationError(
            f"grid_size {list(config.grid_size)} does not fit label range "
            f"{list(spec.y0)}..{list(spec.ym)}: {e.errors()[0]['msg']}") from e


def build_density_maps(confident: Sequence[UncertainPrediction], error_model: ErrorModel,
                       config: AdaptationConfig) -> list[LabelDensityMap]:
    """One joint map (m = 1 or joint_map) or one 1-D map per label dimension."""
    dims = confident[0].dims
    if dims == 1 or config.joint_map:
        groups = [(list(confident), error_model)]
    else:
        groups = [([p.component(d) for p in confident], error_model.component(d)) for d in range(dims)]
    maps = []
    for preds, em in groups:
        pred, unc = stack_predictions(preds)
        spec = grid_spec_for(pred, sigma_of(em, unc), config)
        if config.uniform_prior:
            maps.append(uniform_map(spec))
        else:
            maps.append(build_map(preds, em, spec, config.distribution, config.workers))
    return maps


def label_uncertain(maps: list[LabelDensityMap], uncertain: Sequence[UncertainPrediction],
                    error_model: ErrorModel, threshold: ConfidenceThreshold,
                    config: AdaptationConfig) -> PseudoLabelSet:
    target = maps[0] if len(maps) == 1 else maps
    return generate_all(target, uncertain, error_model, threshold, config.distribution, config.workers)


def _naive_labels(uncertain: Sequence[UncertainPrediction]) -> PseudoLabelSet:
    labels = [PseudoLabel(value=p.prediction, credibility=1.0, source_index=p.input_index)
              for p in uncertain]
    return PseudoLabelSet(labels=labels, summary=summarize(labels))


def _training_rows(model: Regressor, target: Dataset, split: SplitSets, pseudo: PseudoLabelSet,
                   config: AdaptationConfig):
    """Inputs, targets and weights for fine-tuning.

    Confident rows are anchored to the model's deterministic output, so they
    carry no gradient until the model moves. Weights are rescaled to mean 1;
    relative credibility is unchanged and the step size stays that of
    ``learning_rate``.
    """
    rows = [label.source_index for label in pseudo.labels]
    targets = [label.value for label in pseudo.labels]
    weights = [0.0 if config.force_zero_credibility else label.credibility for label in pseudo.labels]
    if config.include_confident and split.confident:
        conf_rows = [p.input_index for p in split.confident]
        rows.extend(conf_rows)
        targets.extend(forward(model, target.features[conf_rows]).tolist())
        weights.extend([1.0] * len(conf_rows))
    weights = np.asarray(weights, dtype=float)
    if weights.size and weights.mean() > 0:
        weights = weights / weights.mean()
    return target.features[rows], np.asarray(targets, dtype=float), weights


def _subset_metrics(before: Regressor, after: Regressor, data: Dataset) -> dict:
    return {"before": evaluate(before, data), "after": evaluate(after, data)}


def _uncertain_error_ratio(model: Regressor, target: Dataset, split: SplitSets) -> Optional[float]:
    sq = np.sum((forward(model, target.features) - target.labels) ** 2, axis=1)
    total = float(sq.sum())
    if total == 0:
        return None
    return float(sq[[p.input_index for p in split.uncertain]].sum()) / total


def _build_report(method: str, config: AdaptationConfig, source_model: Regressor,
                  target_model: Regressor, target: Dataset, target_test: Optional[Dataset],
                  split: SplitSets, pseudo: PseudoLabelSet, threshold: ConfidenceThreshold,
                  error_model: ErrorModel, history: list[float],
                  early_stop_epoch: Optional[int],
                  test_split: Optional[SplitSets] = None) -> RunReport:
    report = RunReport(
        method=method,
        split_sizes={"target": len(target), "confident": len(split.confident),
                     "uncertain": len(split.uncertain),
                     "test": len(target_test) if target_test is not None else 0},
        uncertain_ratio=len(split.uncertain) / len(target),
        beta_summary={k: v for k, v in pseudo.summary.items() if k.startswith("beta_")},
        fallback_fraction=pseudo.summary.get("fallback_fraction", 0.0),
        pseudo_label_failures=len(pseudo.failures),
        calibration={"eta": threshold.eta, "tau": list(threshold.tau), "a0": list(error_model.a0),
                     "a1": list(error_model.a1), "q": error_model.segments},
        loss_history=history,
        early_stop_epoch=early_stop_epoch,
        config=config.model_dump(),
        created_at=datetime.now(timezone.utc).isoformat(),
    )
    reductions = {"reference_mse_pct": REFERENCE_MSE_REDUCTION_PCT,
                  "reference_rmsle_pct": REFERENCE_RMSLE_REDUCTION_PCT}

    if target.labels is not None:
        report.metrics["adaptation"] = _subset_metrics(source_model, target_model, target)
        unc_rows = [p.input_index for p in split.uncertain]
        report.metrics["adaptation_uncertain"] = _subset_metrics(
            source_model, target_model, target.subset(unc_rows))
        report.uncertain_error_ratio = _uncertain_error_ratio(source_model, target, split)
        by_index = {p.input_index: p for p in split.uncertain}
        labels = pseudo.labels
        report.beta_accuracy_correlation = beta_accuracy_correlation(
            labels, [by_index[l.source_index] for l in labels],
            target.labels[[l.source_index for l in labels]])

    if target_test is not None and target_test.labels is not None:
        report.metrics["test"] = _subset_metrics(source_model, target_model, target_test)
        if test_split is not None and test_split.uncertain:
            report.metrics["test_uncertain"] = _subset_metrics(
                source_model, target_model,
                target_test.subset([p.input_index for p in test_split.uncertain]))

    for name, m in report.metrics.items():
        reductions[f"{name}_mse_pct"] = relative_reduction(m["before"].mse, m["after"].mse)
        reductions[f"{name}_rmsle_pct"] = relative_reduction(m["before"].rmsle, m["after"].rmsle)
    report.reductions = reductions
    return report


# ── Orchestration ─────────────────────────────────────────────────────────────

def _run(method: str, source_model: Regressor, target: Dataset, config: AdaptationConfig,
         calibration: Dataset, target_test: Optional[Dataset]) -> AdaptationOutcome:
    new_run_id()
    logger.info(f"Run {method}: target={len(target)} calibration={len(calibration)} seed={config.seed}")
    seeds = stage_seeds(config.seed)
    model = source_model.with_dropout(config.dropout_rate)

    threshold, error_model = calibrate(model, calibration, config, seeds[SEED_CALIBRATION])

    target_preds = mc_predict_batch(model, target.features, config.samplings_S,
                                    seeds[SEED_TARGET], config.workers)
    split = classify(target_preds, threshold)
    if not split.confident:
        raise PipelineError("classify", "no confident target predictions")
    if not split.uncertain:
        raise PipelineError("classify", "no uncertain target predictions")
    logger.info(f"Classified target: confident={len(split.confident)} uncertain={len(split.uncertain)}")

    if method == "tasfar":
        maps = build_density_maps(split.confident, error_model, config)
        pseudo = label_uncertain(maps, split.uncertain, error_model, threshold, config)
    else:
        maps, pseudo = [], _naive_labels(split.uncertain)
    if not pseudo.labels:
        raise PipelineError("pseudo-label", "every uncertain prediction failed")

    inputs, targets, weights = _training_rows(model, target, split, pseudo, config)
    history: list[float] = []
    early_stop_epoch = None
    target_model = model
    if config.max_epochs > 0:
        batches = make_batches(inputs, targets, weights, config.batch_size, rng=seeds[SEED_BATCHES])
        stop = None
        if config.early_stop:
            def stop(h):
                return early_stop_check(h, config.early_stop_window, config.early_stop_ratio)
        try:
            tuned, history = train(model.with_dropout(config.finetune_dropout_rate), batches,
                                   config.learning_rate, config.max_epochs,
                                   rng=seeds[SEED_TRAIN], stop_when=stop)
            target_model = tuned.with_dropout(config.dropout_rate)
        except NumericDivergenceError as e:
            e.report = _build_report(method, config, model, model, target, None, split, pseudo,
                                     threshold, error_model, e.loss_history, None)
            logger.error(f"Training diverged: {e}")
            raise
        if config.early_stop and stop(history):
            early_stop_epoch = len(history)
    logger.info(f"Training: {len(history)} epochs on {len(weights)} rows, early stop={early_stop_epoch}")

    test_preds, test_split = [], None
    if target_test is not None:
        test_preds = mc_predict_batch(model, target_test.features, config.samplings_S,
                                      seeds[SEED_TEST], config.workers)
        test_split = classify(test_preds, threshold)

    report = _build_report(method, config, model, target_model, target, target_test, split, pseudo,
                           threshold, error_model, history, early_stop_epoch, test_split)
    if "adaptation" in report.metrics:
        m = report.metrics["adaptation"]
        logger.info(f"Adaptation MSE {m['before'].mse:.5g} → {m['after'].mse:.5g}")
    return AdaptationOutcome(target_model=target_model, report=report, pseudo_labels=pseudo,
                             density_maps=maps, target_predictions=target_preds, split=split,
                             test_predictions=test_preds, test_split=test_split,
                             threshold=threshold, error_model=error_model)


def adapt(source_model: Regressor, target: Dataset, config: AdaptationConfig,
          source_calibration_data: Dataset,
          target_test: Optional[Dataset] = None) -> AdaptationOutcome:
    """Full TASFAR run: density-map pseudo-labels weighted by credibility."""
    return _run("tasfar", source_model, target, config, source_calibration_data, target_test)


def baseline_naive_selftrain(source_model: Regressor, target: Dataset, config: AdaptationConfig,
                             source_calibration_data: Dataset,
                             target_test: Optional[Dataset] = None) -> AdaptationOutcome:
    """Same pipeline with pseudo-label = own prediction and every weight 1."""
    return _run("naive_selftrain", source_model, target, config, source_calibration_data, target_test)


def train_source(train_data: Dataset, config: AdaptationConfig) -> tuple[Regressor, list[float]]:
    """Supervised source model: input -> hidden_sizes -> label dims, all weights 1."""
    if train_data.labels is None:
        raise DataError("source training data must carry labels")
    layer_sizes = [train_data.features.shape[1], *config.hidden_sizes, train_data.labels.shape[1]]
    model = init_regressor(layer_sizes, config.dropout_rate, config.seed)
    seeds = stage_seeds(config.seed)
    batches = make_batches(train_data.features, train_data.labels, np.ones(len(train_data)),
                           config.batch_size, rng=seeds[SEED_BATCHES])
    model, history = train(model, batches, config.learning_rate, config.source_epochs,
                           rng=seeds[SEED_TRAIN])
    m = compute_metrics(forward(model, train_data.features), train_data.labels)
    logger.info(f"Source model {layer_sizes}: {len(history)} epochs, train MSE={m.mse:.5g}")
    return model, history
