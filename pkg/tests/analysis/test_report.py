"""Tests for the per-IAP evaluation report."""
import json

import numpy as np
import pandas as pd
import pytest
import torch

from iap_recovery.analysis.cohort import spearman_matrix, value_histogram
from iap_recovery.analysis.plots import (
    plot_example_predictions,
    plot_heatmap,
    plot_histograms,
    plot_training_curve,
    prediction_marks,
    save_figure,
)
from iap_recovery.analysis.report import build_report, build_report_from_predictions, format_report, write_report
from iap_recovery.core.checkpoint import Checkpoint
from iap_recovery.core.model import PredictorModel, TrainConfig
from iap_recovery.core.schema import apply_regression_variant, decode_prediction, encode_labels, one_hot
from iap_recovery.exceptions import EvaluationError, SchemaMismatchError


def sample_values(schema, rng):
    values = {}
    for d in schema.descriptors:
        values[d.name] = d.categories[rng.integers(len(d.categories))] if d.categories else f"{rng.uniform(1, 3):.2f}"
    return values


@pytest.fixture
def labelled(small_schema):
    rng = np.random.default_rng(0)
    return [encode_labels(sample_values(small_schema, rng), small_schema) for _ in range(25)]


class TestBuildReport:
    """Tests for build_report_from_predictions."""

    def test_perfect_predictor(self, labelled, small_schema):
        """One-hot predictions score 100% with zero MSE."""
        raw = np.stack([one_hot(lv, small_schema).raw for lv in labelled])
        report = build_report_from_predictions(raw, labelled, small_schema)
        assert [r.iap for r in report.rows] == ["manufacturer", "flip_angle", "te"]
        assert report.row("manufacturer").top1 == 1.0
        assert report.row("flip_angle").top2 == 1.0
        assert report.row("te").mse == 0.0
        assert report.row("te").within_2pct == 1.0
        assert report.n_samples == 25

    def test_two_category_heads_have_no_top2(self, labelled, small_schema):
        raw = np.zeros((25, small_schema.output_width))
        report = build_report_from_predictions(raw, labelled, small_schema)
        assert report.row("manufacturer").top2 is None
        assert "N/A" in format_report(report)

    def test_matches_per_sample_decoding(self, labelled, small_schema):
        """Batch top-1 equals the share of individually decoded slices that are right."""
        raw = np.random.default_rng(3).standard_normal((25, small_schema.output_width))
        report = build_report_from_predictions(raw, labelled, small_schema)
        for k, descriptor in enumerate(small_schema.categorical):
            hits = [
                decode_prediction(row, small_schema).values[descriptor.name]
                == descriptor.categories[lv.categorical_targets[k]]
                for row, lv in zip(raw, labelled)
            ]
            assert report.row(descriptor.name).top1 == pytest.approx(np.mean(hits))

        errors = [row[-1] - lv.continuous_targets[0] for row, lv in zip(raw, labelled)]
        assert report.row("te").mse == pytest.approx(np.mean(np.square(errors)))

    def test_regressed_rows_are_marked(self, desk_schema):
        """Regressed categorical IAPs get a marker and a footnote."""
        variant = apply_regression_variant(desk_schema, ["flip_angle"])
        rng = np.random.default_rng(1)
        labels = [encode_labels(sample_values(desk_schema, rng), variant) for _ in range(10)]
        raw = np.stack([one_hot(lv, variant).raw for lv in labels])
        report = build_report_from_predictions(raw, labels, variant)
        assert len(report.rows) == 8
        assert report.row("flip_angle").regressed
        assert report.row("flip_angle").n_categories == 4
        text = format_report(report)
        assert "flip_angle*" in text
        assert "trained as continuous" in text

    def test_empty_and_mismatched(self, labelled, small_schema):
        with pytest.raises(EvaluationError, match="empty"):
            build_report_from_predictions(np.zeros((0, 7)), [], small_schema)
        with pytest.raises(EvaluationError, match="label vectors"):
            build_report_from_predictions(np.zeros((3, 7)), labelled, small_schema)

    def test_unknown_row(self, labelled, small_schema):
        report = build_report_from_predictions(np.zeros((25, 7)), labelled, small_schema)
        with pytest.raises(EvaluationError):
            report.row("coil")

    def test_write_report(self, labelled, small_schema, tmp_path):
        """JSON, CSV and text files carry the same rows."""
        raw = np.stack([one_hot(lv, small_schema).raw for lv in labelled])
        report = build_report_from_predictions(raw, labelled, small_schema)
        paths = write_report(report, tmp_path / "eval")
        assert [p.name for p in paths] == ["eval_report.json", "eval_report.csv", "eval_report.txt"]
        assert json.loads(paths[0].read_text())["fingerprint"] == small_schema.fingerprint
        assert len(pd.read_csv(paths[1])) == 3
        assert "100.00%" in paths[2].read_text()


class TestBuildReportWithCheckpoint:
    """Tests for build_report on a real checkpoint."""

    @pytest.fixture
    def checkpoint(self, small_schema):
        torch.manual_seed(0)
        config = TrainConfig(backbone="tiny", image_size=32)
        model = PredictorModel.from_config(small_schema, config)
        return Checkpoint(state_dict=model.state_dict(), schema=small_schema, config=config, best_val_loss=1.0, epoch=0)

    def test_report_on_records(self, checkpoint, small_schema, make_record, write_image, tmp_path):
        records = [
            make_record(f"P{i}", 0, None, write_image(tmp_path / f"{i}.npy", seed=i), manufacturer="GE", flip_angle="8", te="2.0")
            for i in range(4)
        ]
        report = build_report(checkpoint, records, small_schema, device="cpu")
        assert report.n_samples == 4
        assert 0.0 <= report.row("flip_angle").top1 <= 1.0

    def test_trained_regression_variant(self, small_schema, make_record, write_image, tmp_path):
        """Training flip_angle as a continuous head yields an MSE row marked as regressed."""
        from iap_recovery.core.trainer import train

        variant = apply_regression_variant(small_schema, ["flip_angle"])
        records = [
            make_record(
                f"P{i}",
                0,
                None,
                write_image(tmp_path / f"{i}.npy", size=16, seed=i),
                manufacturer=("GE", "Siemens")[i % 2],
                flip_angle=("8", "10", "12", "15")[i % 4],
                te=f"{1.5 + 0.1 * i:.2f}",
            )
            for i in range(10)
        ]
        config = TrainConfig(backbone="tiny", image_size=16, epochs=2, batch_size=4, device="cpu")
        best = train(config, variant, records[:8], records[8:], tmp_path / "run")
        assert best.schema.output_width == 4

        report = build_report(best, records, variant, device="cpu")
        row = report.row("flip_angle")
        assert row.head == "continuous"
        assert row.regressed
        assert row.n_categories == 4
        assert row.top1 is None
        assert np.isfinite(row.mse) and row.mse >= 0
        assert 0.0 <= row.within_2pct <= 1.0

        text = format_report(report)
        assert "flip_angle*" in text
        assert "te*" not in text
        assert "trained as continuous" in text

    def test_schema_mismatch(self, checkpoint, desk_schema, make_record):
        with pytest.raises(SchemaMismatchError):
            build_report(checkpoint, [make_record()], desk_schema)


class TestPlots:
    """Smoke tests for the figure writers."""

    def test_figures_are_written(self, make_record, small_schema, tmp_path):
        records = [
            make_record(f"P{i}", 0, manufacturer=("GE", "Siemens")[i % 2], flip_angle=("8", "12", "15")[i % 3], te=1 + i / 10)
            for i in range(6)
        ]
        histograms = [value_histogram(records, "flip_angle", small_schema, s) for s in ("train", "test")]
        curve = [{"epoch": e, "train_loss": 2.0 / (e + 1), "val_loss": 2.5 / (e + 1), "best_val_loss": 2.5 / (e + 1)} for e in range(3)]

        paths = [
            save_figure(plot_histograms("flip_angle", histograms), tmp_path / "hist.png"),
            save_figure(plot_heatmap(spearman_matrix(records, small_schema), "all"), tmp_path / "heat.png"),
            save_figure(plot_training_curve(curve), tmp_path / "curve.png"),
        ]
        assert all(p.is_file() and p.stat().st_size > 0 for p in paths)

    def test_example_predictions_figure(self, small_schema, tmp_path):
        """Slices captioned with predicted and true IAPs render for a partial last row."""
        rng = np.random.default_rng(5)
        truths = [{"manufacturer": "GE", "flip_angle": "8", "te": 2.0 + i / 10} for i in range(5)]
        raw = np.stack([one_hot(encode_labels(t, small_schema), small_schema).raw for t in truths])
        decoded = [decode_prediction(row, small_schema) for row in raw]
        images = rng.random((5, 16, 16)) * 255

        fig = plot_example_predictions(images, decoded, truths, small_schema, columns=4)
        assert len(fig.axes) == 8
        captions = [t.get_text() for ax in fig.axes for t in ax.texts]
        assert "te: 2 (2)" in captions
        assert all(t.get_color() == "tab:green" for ax in fig.axes for t in ax.texts)
        path = save_figure(fig, tmp_path / "examples.png")
        assert path.stat().st_size > 0


class TestPredictionMarks:
    """Tests for per-slice hit marks on example figures."""

    def marks(self, schema, predicted, truth):
        raw = one_hot(encode_labels(predicted, schema), schema).raw
        return prediction_marks(decode_prediction(raw, schema), truth, schema)

    def test_categorical_exact_label(self, small_schema):
        predicted = {"manufacturer": "GE", "flip_angle": "8", "te": 2.0}
        marks = self.marks(small_schema, predicted, {**predicted, "manufacturer": "Siemens"})
        assert marks == {"manufacturer": False, "flip_angle": True, "te": True}

    @pytest.mark.parametrize("predicted, hit", [(2.039, True), (1.961, True), (2.04, False), (2.1, False)])
    def test_continuous_uses_relative_error(self, small_schema, predicted, hit):
        """Under 2% of the true value is a hit; exactly 2% is not."""
        truth = {"manufacturer": "GE", "flip_angle": "8", "te": 2.0}
        assert self.marks(small_schema, {**truth, "te": predicted}, truth)["te"] is hit

    def test_zero_target_is_unmarked(self, small_schema):
        truth = {"manufacturer": "GE", "flip_angle": "8", "te": 0.0}
        assert self.marks(small_schema, {**truth, "te": 0.01}, truth)["te"] is None

    def test_regressed_categorical_compares_label_values(self, small_schema):
        """A regressed flip_angle of 10.1 against a true label of '10' is within 2%."""
        variant = apply_regression_variant(small_schema, ["flip_angle"])
        raw = np.array([1.0, 0.0, 10.1, 2.0])
        decoded = decode_prediction(raw, variant)
        marks = prediction_marks(decoded, {"manufacturer": "GE", "flip_angle": "10", "te": 2.0}, variant)
        assert marks == {"manufacturer": True, "flip_angle": True, "te": True}
