"""Tests for the command line entry point and its exit codes."""
import json

import numpy as np
import pandas as pd
import pytest

import cli.main
import run
from adaptation.metrics import compute_metrics
from cli.main import build_parser, main

SMALL_CONFIG = {"samplings_S": 10, "segments_q": 20, "grid_cells": 50, "hidden_sizes": [8],
                "source_epochs": 15, "max_epochs": 3}


def write_config(path, **changes):
    path.write_text(json.dumps({**SMALL_CONFIG, **changes}))
    return str(path)


class TestParser:
    def test_requires_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_gen_scenario_needs_spec_or_preset(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["gen-scenario"])
        with pytest.raises(SystemExit):
            build_parser().parse_args(["gen-scenario", "--spec", "s.json", "--preset", "no_gap"])

    def test_adapt_defaults(self):
        args = build_parser().parse_args(["adapt", "--model", "m", "--target", "t", "--calibration", "c"])
        assert args.method == "tasfar" and args.test is None and args.seed is None

    def test_launcher_uses_cli_main(self):
        assert run.main is cli.main.main


class TestCommands:
    def test_gen_scenario_preset(self, tmp_path):
        assert main(["gen-scenario", "--preset", "no_gap", "--seed", "2", "--out-dir", str(tmp_path)]) == 0
        source = pd.read_csv(tmp_path / "source.csv")
        target = pd.read_csv(tmp_path / "target.csv")
        assert list(source.columns) == ["x0", "x1", "x2", "x3", "y"]
        assert len(source) == 4000 and len(target) == 5000
        assert json.loads((tmp_path / "scenario.json").read_text())["seed"] == 2

    def test_split(self, tmp_path):
        data = tmp_path / "houses.csv"
        pd.DataFrame({"lon": [1.0, 2.0, 3.0, 4.0], "rooms": [2, 3, 4, 5],
                      "price": [10.0, 20.0, 30.0, 40.0]}).to_csv(data, index=False)
        code = main(["split", "--data", str(data), "--labels", "price", "--column", "lon",
                     "--op", ">", "--value", "2.5", "--out-dir", str(tmp_path / "out")])
        assert code == 0
        target = pd.read_csv(tmp_path / "out" / "target.csv")
        assert list(target["lon"]) == [3.0, 4.0]
        assert list(target["price"]) == [30.0, 40.0]
        assert len(pd.read_csv(tmp_path / "out" / "source.csv")) == 2

    def test_split_empty_side_is_data_error(self, tmp_path):
        data = tmp_path / "d.csv"
        pd.DataFrame({"lon": [1.0, 2.0], "price": [1.0, 2.0]}).to_csv(data, index=False)
        code = main(["split", "--data", str(data), "--labels", "price", "--column", "lon",
                     "--op", ">", "--value", "10", "--out-dir", str(tmp_path)])
        assert code == 3

    def test_invalid_config_exit_code(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"eta": 5.0}))
        code = main(["train-source", "--data", str(tmp_path / "d.csv"), "--labels", "y",
                     "--config", str(cfg), "--out-dir", str(tmp_path)])
        assert code == 2

    def test_missing_file_exit_code(self, tmp_path):
        code = main(["evaluate", "--model", str(tmp_path / "none.bin"), "--data", str(tmp_path / "d.csv")])
        assert code == 3

    def test_missing_label_column(self, tmp_path):
        data = tmp_path / "d.csv"
        pd.DataFrame({"a": [1.0, 2.0]}).to_csv(data, index=False)
        code = main(["train-source", "--data", str(data), "--labels", "y", "--out-dir", str(tmp_path)])
        assert code == 3


@pytest.mark.slow
class TestEndToEnd:
    @pytest.fixture(scope="class")
    def workspace(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("e2e")
        assert main(["gen-scenario", "--preset", "concentrated", "--out-dir", str(root / "data")]) == 0
        config = write_config(root / "config.json")
        code = main(["train-source", "--data", str(root / "data" / "source.csv"), "--labels", "y",
                     "--config", config, "--out-dir", str(root / "source")])
        assert code == 0
        return root, config

    def test_train_source_outputs(self, workspace):
        root, _ = workspace
        manifest = json.loads((root / "source" / "train_manifest.json").read_text())
        assert manifest["train_rows"] + manifest["calibration_rows"] == 4000
        assert len(manifest["loss_history"]) == SMALL_CONFIG["source_epochs"]
        assert (root / "source" / "source_model.bin.meta.json").exists()
        assert list(pd.read_csv(root / "source" / "calibration.csv").columns) == ["x0", "x1", "x2", "x3", "y"]

    def test_adapt_writes_artifacts(self, workspace, capsys):
        root, config = workspace
        out = root / "adapt"
        code = main(["adapt", "--model", str(root / "source" / "source_model.bin"),
                     "--target", str(root / "data" / "target.csv"),
                     "--calibration", str(root / "source" / "calibration.csv"),
                     "--config", config, "--test", "0.2", "--out-dir", str(out)])
        assert code == 0
        reductions = json.loads(capsys.readouterr().out)
        assert reductions["reference_mse_pct"] == 22.0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["method"] == "tasfar"
        assert set(manifest["artifacts"]) >= {"model", "pseudo_labels", "density_map", "predictions"}
        assert manifest["split_sizes"]["test"] == 1000
        predictions = pd.read_csv(out / "predictions.csv")
        assert len(predictions) == 4000
        assert {"y", "source_y", "adapted_y", "uncertainty_y", "confident"} <= set(predictions.columns)

        # the adapted model is evaluated with the source transform
        code = main(["evaluate", "--model", str(out / "adapted_model.bin"),
                     "--data", str(root / "data" / "target.csv"), "--out", str(out / "metrics.json")])
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["count"] == 5000 and metrics["mse"] >= 0

    def test_test_split_predictions(self, workspace):
        root, _ = workspace
        out = root / "adapt"
        manifest = json.loads((out / "manifest.json").read_text())
        assert "predictions_test" in manifest["artifacts"]
        test = pd.read_csv(out / "predictions_test.csv")
        assert len(test) == 1000
        assert set(test["confident"]) <= {0, 1}
        # the exported rows reproduce the reported test metrics
        for stage, column in (("before", "source_y"), ("after", "adapted_y")):
            mse = compute_metrics(test[column].to_numpy(), test["y"].to_numpy()).mse
            assert mse == pytest.approx(manifest["metrics"]["test"][stage]["mse"], rel=1e-9)
        uncertain = test[test["confident"] == 0]
        if len(uncertain):
            mse = compute_metrics(uncertain["adapted_y"].to_numpy(), uncertain["y"].to_numpy()).mse
            assert mse == pytest.approx(manifest["metrics"]["test_uncertain"]["after"]["mse"], rel=1e-9)

    def test_adapt_is_reproducible(self, workspace, tmp_path):
        root, config = workspace

        def adapt_into(out):
            code = main(["adapt", "--model", str(root / "source" / "source_model.bin"),
                         "--target", str(root / "data" / "target.csv"),
                         "--calibration", str(root / "source" / "calibration.csv"),
                         "--config", config, "--test", "0.2", "--out-dir", str(out)])
            assert code == 0
            manifest = json.loads((out / "manifest.json").read_text())
            manifest.pop("created_at")
            manifest.pop("artifacts")
            return json.dumps(manifest, sort_keys=True), (out / "predictions.csv").read_bytes()

        assert adapt_into(tmp_path / "a") == adapt_into(tmp_path / "b")

    def test_grid_size_too_coarse_exit_code(self, workspace, tmp_path):
        root, _ = workspace
        config = write_config(tmp_path / "coarse.json", grid_size=[1000.0], max_epochs=0)
        code = main(["adapt", "--model", str(root / "source" / "source_model.bin"),
                     "--target", str(root / "data" / "target.csv"),
                     "--calibration", str(root / "source" / "calibration.csv"),
                     "--config", config, "--out-dir", str(tmp_path / "out")])
        assert code == 2

    def test_naive_method(self, workspace):
        root, config = workspace
        out = root / "naive"
        code = main(["adapt", "--model", str(root / "source" / "source_model.bin"),
                     "--target", str(root / "data" / "target.csv"),
                     "--calibration", str(root / "source" / "calibration.csv"),
                     "--config", config, "--method", "naive", "--out-dir", str(out)])
        assert code == 0
        assert json.loads((out / "manifest.json").read_text())["method"] == "naive_selftrain"
        assert not (out / "density_map.csv").exists()

    def test_divergence_exit_code(self, workspace, tmp_path):
        root, _ = workspace
        config = write_config(tmp_path / "bad.json", learning_rate=1e8, max_epochs=30, early_stop=False)
        with np.errstate(all="ignore"):
            code = main(["adapt", "--model", str(root / "source" / "source_model.bin"),
                         "--target", str(root / "data" / "target.csv"),
                         "--calibration", str(root / "source" / "calibration.csv"),
                         "--config", config, "--out-dir", str(tmp_path / "out")])
        assert code == 4
        assert json.loads((tmp_path / "out" / "manifest.json").read_text())["loss_history"] is not None
