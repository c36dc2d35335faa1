"""Tests for the adaptation pipeline, metrics, early stopping and sweeps."""
import json
import time

import numpy as np
import pytest

from adaptation.metrics import compute_metrics, evaluate, relative_reduction
from adaptation.pipeline import (_training_rows, adapt, baseline_naive_selftrain, early_stop_check,
                                 stage_seeds, train_source)
from adaptation.sweep import sweep
from common.errors import (ConfigurationError, DataError, DataIOError, NumericDivergenceError,
                           PipelineError)
from common.models import Dataset
from config.adaptation import AdaptationConfig
from ingest.split import holdout_split
from ingest.synthetic import ScenarioSpec, gen_scenario
from model.regressor import Regressor, forward

SMALL = dict(samplings_S=10, segments_q=20, grid_cells=50, hidden_sizes=[16],
             source_epochs=30, max_epochs=5, learning_rate=1e-3, seed=0)


def small_scenario(seed: int = 0, preset=ScenarioSpec.concentrated):
    data = json.loads(preset(seed=seed).to_json())
    data.update(source_count=1500, target_count=800)
    return gen_scenario(ScenarioSpec.from_dict(data))


@pytest.fixture(scope="module")
def trained():
    """(source model, calibration split, target) for a small concentrated scenario."""
    source, target = small_scenario()
    config = AdaptationConfig(**SMALL)
    train_data, calibration = holdout_split(source, 0.3, seed=0)
    model, history = train_source(train_data, config)
    return model, calibration, target, history


class TestEarlyStop:
    def test_too_short(self):
        assert not early_stop_check(list(range(39, 0, -1)), window=20)

    def test_linear_decline_never_stops(self):
        h = [200.0 - t for t in range(200)]
        assert not any(early_stop_check(h[:n], 20, 0.1) for n in range(40, 201))

    def test_plateau_stops_within_window(self):
        k = 50
        h = [100.0 - min(t, k) for t in range(150)]
        first = next(n for n in range(40, 151) if early_stop_check(h[:n], 20, 0.1))
        assert k < first <= k + 21

    def test_geometric_decay(self):
        h = [100 * 0.9 ** t for t in range(100)]
        # 0.9^(n - 21) < 0.1 first holds at n = 43
        first = next(n for n in range(40, 101) if early_stop_check(h[:n], 20, 0.1))
        assert first == 43

    def test_no_initial_drop_stops(self):
        assert early_stop_check([1.0] * 40, 20, 0.1)

    def test_window_too_small(self):
        with pytest.raises(ConfigurationError):
            early_stop_check([1.0] * 10, window=1)


class TestMetrics:
    def test_perfect_fit(self):
        m = compute_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert (m.mse, m.mae, m.rmsle) == (0.0, 0.0, 0.0)
        assert m.count == 3

    def test_rmsle_undefined(self):
        m = compute_metrics([0.0, 0.0], [1.0, -1.0])
        assert m.mse == pytest.approx(1.0) and m.mae == pytest.approx(1.0)
        assert m.rmsle is None and not m.rmsle_defined

    def test_matches_direct_computation(self):
        rng = np.random.default_rng(0)
        pred, true = rng.uniform(0, 5, 100), rng.uniform(0, 5, 100)
        m = compute_metrics(pred, true)
        assert m.mse == pytest.approx(sum((p - t) ** 2 for p, t in zip(pred, true)) / 100)
        assert m.mae == pytest.approx(sum(abs(p - t) for p, t in zip(pred, true)) / 100)
        expected = np.sqrt(sum((np.log(1 + p) - np.log(1 + t)) ** 2 for p, t in zip(pred, true)) / 100)
        assert m.rmsle == pytest.approx(expected)

    def test_evaluate_model(self):
        model = Regressor(layer_sizes=(1, 1), weights=[np.array([[2.0]])], biases=[np.array([0.0])])
        data = Dataset(features=[[1.0], [2.0]], labels=[2.0, 5.0])
        m = evaluate(model, data)
        assert m.mse == pytest.approx(0.5) and m.mae == pytest.approx(0.5)

    def test_evaluate_unlabeled(self):
        model = Regressor(layer_sizes=(1, 1), weights=[np.array([[2.0]])], biases=[np.array([0.0])])
        with pytest.raises(DataError):
            evaluate(model, Dataset(features=[[1.0]]))

    def test_relative_reduction(self):
        assert relative_reduction(2.0, 1.5) == pytest.approx(25.0)
        assert relative_reduction(None, 1.0) is None
        assert relative_reduction(0.0, 1.0) is None


class TestConfig:
    def test_defaults(self):
        c = AdaptationConfig()
        assert (c.eta, c.segments_q, c.samplings_S, c.dropout_rate, c.grid_cells) == (0.9, 40, 20, 0.2, 100)
        assert c.include_confident and c.early_stop

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            AdaptationConfig.from_dict({"etaa": 0.5})

    def test_out_of_range(self):
        with pytest.raises(ConfigurationError):
            AdaptationConfig.from_dict({"eta": 1.5})

    def test_from_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"eta": 0.8, "seed": 5}))
        c = AdaptationConfig.from_json(path)
        assert c.eta == 0.8 and c.seed == 5
        with pytest.raises(DataIOError):
            AdaptationConfig.from_json(tmp_path / "missing.json")

    def test_updated(self):
        c = AdaptationConfig().updated(grid_cells=20)
        assert c.grid_cells == 20
        with pytest.raises(ConfigurationError):
            c.updated(grid_cells=0)

    def test_stage_seeds(self):
        assert stage_seeds(3) == stage_seeds(3)
        assert len(set(stage_seeds(3))) == 5
        assert stage_seeds(3) != stage_seeds(4)


class TestPipelineErrors:
    def test_pipeline_error_names_stage(self):
        e = PipelineError("classify", "no uncertain target predictions")
        assert e.stage == "classify" and "classify" in str(e)
        assert e.exit_code == 3

    def test_train_source_needs_labels(self):
        with pytest.raises(DataError):
            train_source(Dataset(features=np.zeros((5, 2))), AdaptationConfig(**SMALL))

    def test_calibration_needs_labels(self, trained):
        model, calibration, target, _ = trained
        with pytest.raises(DataError):
            adapt(model, target, AdaptationConfig(**SMALL), calibration.without_labels())

    def test_grid_size_too_coarse(self, trained):
        model, calibration, target, _ = trained
        config = AdaptationConfig(**SMALL).updated(grid_size=[1000.0], max_epochs=0)
        with pytest.raises(ConfigurationError, match="grid_size"):
            adapt(model, target, config, calibration)


@pytest.mark.slow
class TestAdaptation:
    def test_source_training(self, trained):
        model, _, _, history = trained
        assert model.layer_sizes == (4, 16, 1)
        assert len(history) == SMALL["source_epochs"]
        assert history[-1] < history[0]

    def test_report_structure(self, trained):
        model, calibration, target, _ = trained
        outcome = adapt(model, target, AdaptationConfig(**SMALL), calibration)
        report = outcome.report
        sizes = report.split_sizes
        assert sizes["confident"] + sizes["uncertain"] == sizes["target"] == len(target)
        assert report.uncertain_ratio == pytest.approx(sizes["uncertain"] / sizes["target"])
        assert report.method == "tasfar"
        assert {"adaptation", "adaptation_uncertain"} <= set(report.metrics)
        assert len(report.loss_history) <= SMALL["max_epochs"]
        assert report.calibration["q"] == SMALL["segments_q"]
        assert report.reductions["reference_mse_pct"] == 22.0
        assert len(outcome.pseudo_labels.labels) + len(outcome.pseudo_labels.failures) == sizes["uncertain"]
        assert len(outcome.density_maps) == 1
        assert 0.0 <= report.uncertain_error_ratio <= 1.0

    def test_before_metrics_are_source_model(self, trained):
        model, calibration, target, _ = trained
        outcome = adapt(model, target, AdaptationConfig(**SMALL), calibration)
        before = outcome.report.metrics["adaptation"]["before"]
        expected = np.mean((forward(model, target.features) - target.labels) ** 2)
        assert before.mse == pytest.approx(expected)

    def test_reproducible(self, trained):
        model, calibration, target, _ = trained
        config = AdaptationConfig(**SMALL)
        a = adapt(model, target, config, calibration)
        b = adapt(model, target, config, calibration)
        assert a.target_model.same_parameters(b.target_model)
        assert a.report.model_dump(exclude={"created_at"}) == b.report.model_dump(exclude={"created_at"})

    def test_zero_credibility_leaves_model_unchanged(self, trained):
        model, calibration, target, _ = trained
        config = AdaptationConfig(**SMALL).updated(force_zero_credibility=True, include_confident=False)
        outcome = adapt(model, target, config, calibration)
        assert outcome.target_model.same_parameters(model)

    def test_zero_credibility_with_confident_rows(self, trained):
        model, calibration, target, _ = trained
        config = AdaptationConfig(**SMALL).updated(force_zero_credibility=True, include_confident=True)
        outcome = adapt(model, target, config, calibration)
        # confident rows are anchored to the model's own output
        for tuned, original in zip(outcome.target_model.weights + outcome.target_model.biases,
                                   model.weights + model.biases):
            np.testing.assert_allclose(tuned, original, atol=1e-10)

    def test_training_rows(self, trained):
        model, calibration, target, _ = trained
        config = AdaptationConfig(**SMALL)
        outcome = adapt(model, target, config.updated(max_epochs=0), calibration)
        inputs, targets, weights = _training_rows(model, target, outcome.split, outcome.pseudo_labels, config)
        n_unc = len(outcome.pseudo_labels.labels)
        assert len(inputs) == n_unc + len(outcome.split.confident)
        assert weights.mean() == pytest.approx(1.0)
        np.testing.assert_allclose(targets[n_unc:], forward(model, inputs[n_unc:]))
        # rescaling keeps credibility relative to the confident weight of 1
        beta = np.array([l.credibility for l in outcome.pseudo_labels.labels])
        np.testing.assert_allclose(weights[:n_unc] / weights[n_unc], beta)

    def test_finetuned_model_keeps_mc_dropout_rate(self, trained):
        model, calibration, target, _ = trained
        config = AdaptationConfig(**SMALL).updated(dropout_rate=0.3)
        outcome = adapt(model, target, config, calibration)
        assert outcome.target_model.dropout_rate == 0.3
        assert not outcome.target_model.same_parameters(model)

    def test_naive_zero_epochs_is_identity(self, trained):
        model, calibration, target, _ = trained
        config = AdaptationConfig(**SMALL).updated(max_epochs=0)
        outcome = baseline_naive_selftrain(model, target, config, calibration)
        assert outcome.target_model.same_parameters(model)
        assert outcome.report.loss_history == []
        assert outcome.report.method == "naive_selftrain"
        assert all(l.credibility == 1.0 for l in outcome.pseudo_labels.labels)
        assert outcome.density_maps == []

    def test_held_out_test_split(self, trained):
        model, calibration, target, _ = trained
        adapt_part, test_part = holdout_split(target, 0.25, seed=1)
        outcome = adapt(model, adapt_part, AdaptationConfig(**SMALL), calibration, test_part)
        assert "test" in outcome.report.metrics
        assert outcome.report.split_sizes["test"] == len(test_part)
        assert outcome.report.reductions["test_mse_pct"] is not None
        assert len(outcome.test_predictions) == len(test_part)
        sizes = len(outcome.test_split.confident) + len(outcome.test_split.uncertain)
        assert sizes == len(test_part)
        if outcome.test_split.uncertain:
            assert "test_uncertain" in outcome.report.metrics

    def test_uniform_prior_diagnostic(self, trained):
        model, calibration, target, _ = trained
        config = AdaptationConfig(**SMALL).updated(uniform_prior=True, max_epochs=0)
        outcome = adapt(model, target, config, calibration)
        assert np.all(outcome.density_maps[0].densities == 1.0)

    def test_divergence_carries_report(self, trained):
        model, calibration, target, _ = trained
        config = AdaptationConfig(**SMALL).updated(learning_rate=1e8, max_epochs=50, early_stop=False)
        with np.errstate(all="ignore"):
            with pytest.raises(NumericDivergenceError) as exc:
                adapt(model, target, config, calibration)
        assert exc.value.report is not None
        assert exc.value.report.loss_history == exc.value.loss_history

    def test_sweep_tables(self, trained):
        model, calibration, target, _ = trained
        tables = sweep(model, target, calibration, AdaptationConfig(**SMALL),
                       grid_cells=(50, 25), segments=(10, 20), etas=(0.8, 0.9))
        assert len(tables["grid"]) == 4
        assert {"map_mae", "map_l1", "pseudo_label_mae", "source_mae"} <= set(tables["grid"].columns)
        assert list(tables["segments"]["segments_q"]) == [10, 20]
        assert list(tables["eta"]["eta"]) == [0.8, 0.9]
        assert tables["eta"]["tau"].is_monotonic_increasing

    def test_sweep_needs_labels(self, trained):
        model, calibration, target, _ = trained
        with pytest.raises(DataError):
            sweep(model, target.without_labels(), calibration, AdaptationConfig(**SMALL))


def _gains_run(seed: int) -> dict:
    """Default-config tasfar and naive runs on a concentrated target plus a no-gap control."""
    config = AdaptationConfig(seed=seed)
    source, target = gen_scenario(ScenarioSpec.concentrated(seed=seed))
    train_data, calibration = holdout_split(source, 0.2, seed=seed)
    model, _ = train_source(train_data, config)
    adapt_part, test_part = holdout_split(target, 0.2, seed=seed)
    started = time.perf_counter()
    tasfar = adapt(model, adapt_part, config, calibration, test_part)
    elapsed = time.perf_counter() - started
    naive = baseline_naive_selftrain(model, adapt_part, config, calibration, test_part)
    _, same = gen_scenario(ScenarioSpec.no_gap(seed=seed))
    same_adapt, same_test = holdout_split(same, 0.2, seed=seed)
    control = adapt(model, same_adapt, config, calibration, same_test)
    return {"target": adapt_part, "tasfar": tasfar, "naive": naive, "control": control,
            "elapsed": elapsed}


@pytest.mark.slow
class TestAdaptationGains:
    @pytest.fixture(scope="class", params=range(5), ids=lambda s: f"seed{s}")
    def run(self, request):
        return _gains_run(request.param)

    def test_pseudo_labels_beat_source_predictions(self, run):
        outcome, target = run["tasfar"], run["target"]
        by_index = {p.input_index: p for p in outcome.split.uncertain}
        labels = outcome.pseudo_labels.labels
        truth = target.labels[[l.source_index for l in labels]]
        pseudo = np.array([l.value for l in labels])
        source = np.array([by_index[l.source_index].prediction for l in labels])
        pseudo_mae = np.abs(pseudo - truth).mean()
        source_mae = np.abs(source - truth).mean()
        assert pseudo_mae <= 0.9 * source_mae

    def test_credibility_tracks_error_reduction(self, run):
        assert run["tasfar"].report.beta_accuracy_correlation > 0

    def test_adaptation_reduces_held_out_uncertain_error(self, run):
        tasfar = run["tasfar"].report.reductions["test_uncertain_mse_pct"]
        naive = run["naive"].report.reductions["test_uncertain_mse_pct"]
        assert tasfar >= 10.0
        assert tasfar > naive
        assert run["elapsed"] < 300.0

    def test_no_gap_control_is_stable(self, run):
        assert abs(run["control"].report.reductions["test_mse_pct"]) < 5.0
