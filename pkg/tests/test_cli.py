"""Tests for the command-line interface."""
import json
from unittest.mock import MagicMock

import pandas as pd
import pytest

from iap_recovery.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, build_parser, main, parse_fractions, train_config
from iap_recovery.exceptions import NonFiniteLossError


@pytest.fixture
def cohort_dir(tmp_path):
    """Small generated cohort: 6 patients x 2 slices at 32x32."""
    out = tmp_path / "cohort"
    assert main(["generate", "--out", str(out), "--patients", "6", "--slices", "2", "--image-size", "32"]) == EXIT_OK
    return out


class TestParser:
    """Tests for argument parsing."""

    def test_train_defaults_echo_full_recipe(self, monkeypatch):
        """Without flags the train recipe is batch 512, 100 epochs, lr 1e-3, weight decay 1e-4."""
        monkeypatch.delenv("IAP_DEVICE", raising=False)
        args = build_parser().parse_args(["train", "--out", "o", "--manifest", "m.csv"])
        config = train_config(args)
        assert (config.batch_size, config.epochs) == (512, 100)
        assert (config.learning_rate, config.weight_decay) == (0.001, 0.0001)
        assert (config.lam, config.eta) == (1.0, 1.0)
        assert args.fractions == (0.7, 0.15, 0.15)
        assert args.seed == 0

    def test_overrides(self):
        args = build_parser().parse_args(
            ["train", "--out", "o", "--manifest", "m.csv", "--preset", "tiny", "--epochs", "2", "--lr", "0.01", "--eta", "0"]
        )
        config = train_config(args)
        assert config.backbone == "tiny"
        assert config.epochs == 2
        assert config.learning_rate == 0.01
        assert config.eta == 0.0

    def test_paper_preset_alias(self, monkeypatch):
        """--preset paper selects the full-scale recipe."""
        monkeypatch.delenv("IAP_DEVICE", raising=False)
        args = build_parser().parse_args(["train", "--out", "o", "--manifest", "m.csv", "--preset", "paper"])
        config = train_config(args)
        assert config.backbone == "full"
        assert (config.batch_size, config.epochs, config.image_size) == (512, 100, 224)

    def test_generate_defaults(self):
        args = build_parser().parse_args(["generate", "--out", "o"])
        assert (args.patients, args.slices, args.image_size) == (20, 10, 64)
        assert args.label_rule == "none"

    def test_parse_fractions(self):
        assert parse_fractions("0.8,0.1,0.1") == (0.8, 0.1, 0.1)
        with pytest.raises(Exception, match="three"):
            parse_fractions("0.5,0.5")

    def test_bad_fractions_exit_2(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["train", "--out", str(tmp_path), "--manifest", "m.csv", "--fractions", "a,b,c"])
        assert info.value.code == 2

    def test_no_command(self, capsys):
        assert main([]) == EXIT_USAGE


class TestGenerate:
    """Tests for the generate command."""

    def test_twenty_patients_ten_slices(self, tmp_path):
        """Default cohort size yields a 200-row manifest plus checksummed outputs."""
        out = tmp_path / "cohort"
        assert main(["generate", "--out", str(out), "--image-size", "32"]) == EXIT_OK
        assert len(pd.read_csv(out / "manifest.csv")) == 200

        outputs = json.loads((out / "outputs.json").read_text())
        assert outputs["command"] == "generate"
        assert "manifest.csv" in outputs["files"]
        assert (out / "run_metadata.json").is_file()

    def test_same_seed_same_outputs(self, tmp_path):
        """Everything but run metadata is byte-identical across runs."""
        for name in ("a", "b"):
            assert main(["generate", "--out", str(tmp_path / name), "--patients", "3", "--slices", "2", "--seed", "4"]) == 0
        assert (tmp_path / "a" / "outputs.json").read_bytes() == (tmp_path / "b" / "outputs.json").read_bytes()

    def test_unwritable_out_dir(self, tmp_path):
        """An output path that is a file is a usage error."""
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["generate", "--out", str(blocker), "--patients", "2", "--slices", "1"]) == EXIT_USAGE

    def test_bad_weights(self, tmp_path):
        code = main(["generate", "--out", str(tmp_path / "c"), "--weights", "manufacturer=1,2,3"])
        assert code == EXIT_USAGE


class TestTrain:
    """Tests for the train command with the training loop mocked out."""

    def test_missing_manifest(self, tmp_path):
        code = main(["train", "--out", str(tmp_path / "run"), "--manifest", str(tmp_path / "absent.csv")])
        assert code == EXIT_USAGE

    def test_non_finite_loss_exit_1(self, cohort_dir, tmp_path, mocker):
        mocker.patch("iap_recovery.cli.train", side_effect=NonFiniteLossError("te", 3, float("nan")))
        code = main(["train", "--out", str(tmp_path / "run"), "--manifest", str(cohort_dir / "manifest.csv")])
        assert code == EXIT_FAILURE

    def test_writes_split_schema_and_outputs(self, cohort_dir, tmp_path, mocker):
        """Train records the split, schema and checksums of what the loop produced."""
        out = tmp_path / "run"

        def fake_train(config, schema, train_records, val_records, out_dir):
            (out_dir / "checkpoint.pt").write_bytes(b"weights")
            (out_dir / "training_curve.csv").write_text("epoch\n0\n")
            checkpoint = MagicMock()
            checkpoint.curve = ({"epoch": 0, "train_loss": 1.0, "val_loss": 1.2, "best_val_loss": 1.2},)
            checkpoint.best_val_loss = 1.2
            checkpoint.epoch = 0
            return checkpoint

        mocked = mocker.patch("iap_recovery.cli.train", side_effect=fake_train)
        code = main(
            ["train", "--out", str(out), "--manifest", str(cohort_dir / "manifest.csv"), "--preset", "tiny", "--epochs", "1"]
        )
        assert code == EXIT_OK

        config = mocked.call_args.args[0]
        assert config.epochs == 1 and config.backbone == "tiny"
        split = json.loads((out / "split.json").read_text())
        assert sorted(split["train"] + split["val"] + split["test"]) == [f"P{i:04d}" for i in range(6)]
        assert json.loads((out / "schema.json").read_text())["output_width"] == 20
        files = json.loads((out / "outputs.json").read_text())["files"]
        assert {"checkpoint.pt", "split.json", "schema.json", "training_curve.png"} <= set(files)

    def test_split_file_is_reused(self, cohort_dir, tmp_path, mocker):
        split_path = tmp_path / "split.json"
        split_path.write_text(json.dumps({"train": ["P0000"], "val": [], "test": []}))
        mocked = mocker.patch("iap_recovery.cli.train", side_effect=NonFiniteLossError("te", 0, float("inf")))
        main(
            [
                "train",
                "--out",
                str(tmp_path / "run"),
                "--manifest",
                str(cohort_dir / "manifest.csv"),
                "--split-file",
                str(split_path),
            ]
        )
        train_records = mocked.call_args.args[2]
        assert {r.patient_id for r in train_records} == {"P0000"}


class TestAnalyze:
    """Tests for the analyze command."""

    def test_writes_statistics(self, cohort_dir, tmp_path, capsys):
        out = tmp_path / "analysis"
        code = main(["analyze", "--out", str(out), "--manifest", str(cohort_dir / "manifest.csv")])
        assert code == EXIT_OK
        assert (out / "histograms.csv").is_file()
        assert (out / "histogram_manufacturer.png").is_file()
        assert (out / "spearman_train.csv").is_file()
        assert "Num. in both" in (out / "overlap.txt").read_text()
        assert "Unique IAP combinations" in capsys.readouterr().out

    def test_wrong_schema_columns(self, cohort_dir, tmp_path):
        """A manifest lacking the full schema's IAP columns is a usage error."""
        code = main(["analyze", "--out", str(tmp_path / "a"), "--manifest", str(cohort_dir / "manifest.csv"), "--schema", "full"])
        assert code == EXIT_USAGE


class TestEvaluate:
    """Tests for the evaluate command."""

    def test_missing_checkpoint(self, cohort_dir, tmp_path):
        code = main(
            [
                "evaluate",
                "--out",
                str(tmp_path / "eval"),
                "--manifest",
                str(cohort_dir / "manifest.csv"),
                "--checkpoint",
                str(tmp_path / "absent.pt"),
            ]
        )
        assert code == EXIT_USAGE

    def test_writes_report_and_example_figure(self, cohort_dir, tmp_path, desk_schema):
        """An untrained checkpoint still yields the report files and the example-predictions figure."""
        import torch

        from iap_recovery.core.checkpoint import Checkpoint, save_checkpoint
        from iap_recovery.core.model import PredictorModel, TrainConfig

        torch.manual_seed(0)
        config = TrainConfig(backbone="tiny", image_size=32, device="cpu")
        model = PredictorModel.from_config(desk_schema, config)
        path = save_checkpoint(
            Checkpoint(state_dict=model.state_dict(), schema=desk_schema, config=config, best_val_loss=1.0, epoch=0),
            tmp_path / "checkpoint.pt",
        )
        out = tmp_path / "eval"
        code = main(
            [
                "evaluate",
                "--out",
                str(out),
                "--manifest",
                str(cohort_dir / "manifest.csv"),
                "--checkpoint",
                str(path),
                "--subset",
                "train",
            ]
        )
        assert code == EXIT_OK
        files = json.loads((out / "outputs.json").read_text())["files"]
        assert {"eval_report.json", "eval_report.txt", "example_predictions.png"} <= set(files)

        skipped = tmp_path / "eval_no_examples"
        main(
            [
                "evaluate",
                "--out",
                str(skipped),
                "--manifest",
                str(cohort_dir / "manifest.csv"),
                "--checkpoint",
                str(path),
                "--subset",
                "train",
                "--examples",
                "0",
            ]
        )
        assert not (skipped / "example_predictions.png").exists()


class TestRoute:
    """Tests for the route command with domain training and the experiment mocked out."""

    def test_model_ids_map_onto_domain_values(self, cohort_dir, tmp_path, mocker, desk_schema):
        """A table routing GE -> A and Siemens -> B trains A on GE slices and B on Siemens slices."""
        from iap_recovery.routing.router import RouteTable, RoutingExperimentResult, save_route_table

        table_path = save_route_table(
            RouteTable.exact_match("manufacturer", {"GE": "A", "Siemens": "B"}, default="A"), tmp_path / "routes.json"
        )
        mocker.patch("iap_recovery.cli.IapPredictor.from_path", return_value=MagicMock(schema=desk_schema))

        def fake_train_domain_models(train_records, domain_iap, schema, config, out_dir, domains):
            for mid in domains:
                (out_dir / mid).mkdir(parents=True)
                (out_dir / mid / "checkpoint.pt").write_bytes(b"weights")
            return {mid: MagicMock() for mid in domains}

        trained = mocker.patch("iap_recovery.cli.train_domain_models", side_effect=fake_train_domain_models)
        experiment = mocker.patch(
            "iap_recovery.cli.run_routing_experiment",
            return_value=RoutingExperimentResult(
                fixed_accuracy={"A": 0.5, "B": 0.5},
                in_domain_accuracy={"A": 1.0, "B": 1.0},
                routed_accuracy=1.0,
                oracle_accuracy=1.0,
                domain_key_accuracy=1.0,
                n_samples=2,
                domain_iap="manufacturer",
                domain_values={"A": ("GE",), "B": ("Siemens",)},
            ),
        )
        out = tmp_path / "route"
        code = main(
            [
                "route",
                "--out",
                str(out),
                "--manifest",
                str(cohort_dir / "manifest.csv"),
                "--iap-checkpoint",
                str(tmp_path / "iap.pt"),
                "--route-table",
                str(table_path),
                "--preset",
                "tiny",
            ]
        )
        assert code == EXIT_OK

        expected = {"A": ("GE",), "B": ("Siemens",)}
        assert trained.call_args.kwargs["domains"] == expected
        assert experiment.call_args.kwargs["domains"] == expected
        assert (out / "domain_models" / "A" / "checkpoint.pt").is_file()
        assert "A model, GE images only" in (out / "routing_result.txt").read_text()

    def test_table_without_domain_rules_is_usage_error(self, cohort_dir, tmp_path, mocker, desk_schema):
        """Training domain models needs every model id to serve some domain value."""
        from iap_recovery.routing.router import Condition, RouteRule, RouteTable, save_route_table

        table = RouteTable(rules=(RouteRule((Condition("field_strength", ">=", 3.0),), "high"),), default="low")
        table_path = save_route_table(table, tmp_path / "routes.json")
        mocker.patch("iap_recovery.cli.IapPredictor.from_path", return_value=MagicMock(schema=desk_schema))
        trained = mocker.patch("iap_recovery.cli.train_domain_models")
        code = main(
            [
                "route",
                "--out",
                str(tmp_path / "route"),
                "--manifest",
                str(cohort_dir / "manifest.csv"),
                "--iap-checkpoint",
                str(tmp_path / "iap.pt"),
                "--route-table",
                str(table_path),
            ]
        )
        assert code == EXIT_USAGE
        trained.assert_not_called()
