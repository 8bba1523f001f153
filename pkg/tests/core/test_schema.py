"""Tests for the IAP schema, label encoding and prediction decoding."""
import json

import numpy as np
import pytest

from iap_recovery.core.schema import (
    IapDescriptor,
    IapKind,
    PredictionVector,
    apply_regression_variant,
    build_schema,
    decode_prediction,
    encode_labels,
    load_schema,
    one_hot,
    rank_logits,
    revert_regression_variant,
    save_schema,
)
from iap_recovery.exceptions import EncodingError, SchemaError


def reference_values(schema):
    values = {}
    for d in schema.descriptors:
        values[d.name] = d.categories[0] if d.kind is IapKind.CATEGORICAL else "2.31"
    return values


class TestIapDescriptor:
    """Tests for descriptor validation and value parsing."""

    def test_categorical_needs_two_categories(self):
        """Should reject categorical IAPs with fewer than two categories."""
        with pytest.raises(SchemaError, match="at least 2"):
            IapDescriptor("manufacturer", IapKind.CATEGORICAL, ("GE",))

    def test_duplicate_categories_rejected(self):
        """Should reject repeated category labels."""
        with pytest.raises(SchemaError, match="duplicate"):
            IapDescriptor("manufacturer", IapKind.CATEGORICAL, ("GE", "GE"))

    def test_continuous_rejects_categories(self):
        """Continuous IAPs carry no category list."""
        with pytest.raises(SchemaError):
            IapDescriptor("te", IapKind.CONTINUOUS, ("1", "2"))

    def test_regression_flag_needs_numeric_labels(self):
        """Should refuse treat_as_continuous on non-numeric labels."""
        with pytest.raises(SchemaError, match="numeric"):
            IapDescriptor("manufacturer", IapKind.CATEGORICAL, ("GE", "Siemens"), treat_as_continuous=True)

    def test_kind_accepts_plain_string(self):
        """Kind given as its string value is normalized to the enum."""
        descriptor = IapDescriptor("te", "continuous")
        assert descriptor.kind is IapKind.CONTINUOUS
        assert descriptor.head_width == 1

    def test_parse_missing_value(self):
        """Empty or absent values are encoding errors."""
        descriptor = IapDescriptor("te", IapKind.CONTINUOUS)
        with pytest.raises(EncodingError, match="Missing"):
            descriptor.parse("  ")
        with pytest.raises(EncodingError, match="Missing"):
            descriptor.parse(None)

    def test_parse_rejects_non_finite(self):
        """Continuous values must be finite numbers."""
        descriptor = IapDescriptor("te", IapKind.CONTINUOUS)
        with pytest.raises(EncodingError):
            descriptor.parse("nan")
        with pytest.raises(EncodingError):
            descriptor.parse("fast")

    def test_parse_unknown_category(self):
        """Labels outside the vocabulary are rejected with the IAP name."""
        descriptor = IapDescriptor("manufacturer", IapKind.CATEGORICAL, ("GE", "Siemens"))
        with pytest.raises(EncodingError, match="manufacturer"):
            descriptor.parse("Philips")

    def test_numeric_form(self):
        """Categorical maps to class index; regressed and continuous to their values."""
        flip = IapDescriptor("flip_angle", IapKind.CATEGORICAL, ("8", "10", "12"))
        assert flip.numeric("12") == 2.0
        regressed = IapDescriptor("flip_angle", IapKind.CATEGORICAL, ("8", "10", "12"), treat_as_continuous=True)
        assert regressed.numeric("12") == 12.0
        assert IapDescriptor("te", IapKind.CONTINUOUS).numeric(" 2.5 ") == 2.5


class TestIapSchema:
    """Tests for head layout and schema documents."""

    def test_desk_layout(self, desk_schema):
        """Desk schema has six categorical heads and TR/TE regression heads."""
        assert desk_schema.K == 6
        assert desk_schema.M == 2
        assert desk_schema.output_width == 20

    def test_full_layout(self, full_schema):
        """Full-cardinality schema: 94 categorical units plus 2 continuous."""
        assert full_schema.K == 10
        assert full_schema.M == 2
        assert sum(len(d.categories) for d in full_schema.categorical) == 94
        assert full_schema.output_width == 96

    def test_heads_are_contiguous(self, full_schema):
        """Head slices tile the output vector in declaration order."""
        position = 0
        for descriptor in full_schema.descriptors:
            head = full_schema.head_slice(descriptor.name)
            assert head.start == position
            position = head.stop
        assert position == full_schema.output_width

    def test_duplicate_names_rejected(self):
        """Should reject two descriptors with the same name."""
        te = IapDescriptor("te", IapKind.CONTINUOUS)
        with pytest.raises(SchemaError, match="Duplicate"):
            build_schema([te, te])

    def test_empty_schema_rejected(self):
        with pytest.raises(SchemaError):
            build_schema([])

    def test_unknown_descriptor(self, desk_schema):
        with pytest.raises(SchemaError, match="Unknown IAP"):
            desk_schema.descriptor("coil")

    def test_save_and_load(self, desk_schema, tmp_path):
        """A saved schema loads back with the same fingerprint and width."""
        path = save_schema(desk_schema, tmp_path / "schema.json")
        loaded = load_schema(path)
        assert loaded.fingerprint == desk_schema.fingerprint
        assert json.loads(path.read_text())["output_width"] == 20

    def test_declared_width_is_verified(self, tmp_path):
        """Should reject a document whose declared width disagrees with its descriptors."""
        path = tmp_path / "schema.json"
        path.write_text(
            json.dumps(
                {
                    "output_width": 5,
                    "descriptors": [{"name": "manufacturer", "kind": "categorical", "categories": ["GE", "Siemens"]}],
                }
            )
        )
        with pytest.raises(SchemaError, match="declares output width 5"):
            load_schema(path)

    def test_missing_schema_file(self, tmp_path):
        with pytest.raises(SchemaError, match="not found"):
            load_schema(tmp_path / "absent.json")


class TestEncodeDecode:
    """Tests for label encoding and prediction decoding."""

    def test_encode_desk_values(self, desk_schema):
        """Categorical values become indices; continuous values stay native."""
        values = {
            "manufacturer": "Siemens",
            "scanner_model": "Skyra",
            "field_strength": "3.0",
            "patient_position": "FFP",
            "contrast_agent": "Magnevist",
            "flip_angle": "10",
            "tr": "4.27",
            "te": "1.90",
        }
        labels = encode_labels(values, desk_schema)
        assert labels.categorical_targets == (1, 2, 2, 0, 2, 1)
        assert labels.continuous_targets == (4.27, 1.9)

    def test_encode_missing_iap(self, desk_schema):
        values = reference_values(desk_schema)
        del values["te"]
        with pytest.raises(EncodingError, match="te"):
            encode_labels(values, desk_schema)

    def test_round_trip_every_category(self, full_schema):
        """decode(one_hot(encode(v))) returns v for every category of every IAP."""
        base = reference_values(full_schema)
        for descriptor in full_schema.categorical:
            for label in descriptor.categories:
                values = {**base, descriptor.name: label}
                decoded = decode_prediction(one_hot(encode_labels(values, full_schema), full_schema), full_schema)
                assert decoded.values[descriptor.name] == label
                assert decoded.values["te"] == 2.31
                assert decoded.values["tr"] == 2.31

    def test_ties_rank_lowest_index_first(self):
        """Equal logits keep the lower category index first."""
        assert tuple(rank_logits(np.array([1.0, 3.0, 3.0, 0.0]))) == (1, 2, 0, 3)

    def test_decode_wrong_width(self, desk_schema):
        with pytest.raises(EncodingError, match="schema expects 20"):
            decode_prediction(np.zeros(19), desk_schema)

    def test_decode_reports_rankings(self, small_schema):
        """Every categorical head carries its full ranking."""
        raw = np.array([0.1, 0.9, 0.0, 5.0, 1.0, 2.0, 3.3])
        decoded = decode_prediction(raw, small_schema)
        assert decoded.values == {"manufacturer": "Siemens", "flip_angle": "10", "te": 3.3}
        assert decoded.rankings["flip_angle"] == (1, 3, 2, 0)
        assert "te" not in decoded.rankings

    def test_prediction_vector_accessors(self, small_schema):
        """Head accessors respect the head kind."""
        pred = PredictionVector(raw=np.arange(7.0), schema=small_schema)
        assert list(pred.logits("flip_angle")) == [2.0, 3.0, 4.0, 5.0]
        assert pred.value("te") == 6.0
        with pytest.raises(EncodingError):
            pred.logits("te")
        with pytest.raises(EncodingError):
            pred.value("manufacturer")
        assert not pred.raw.flags.writeable


class TestRegressionVariant:
    """Tests for training numeric categorical IAPs as regression heads."""

    def test_apply_to_flip_angle(self, desk_schema):
        """Flip angle becomes a width-1 head targeting degrees."""
        variant = apply_regression_variant(desk_schema, ["flip_angle"])
        assert variant.output_width == desk_schema.output_width - 4 + 1
        assert variant.descriptor("flip_angle").head_kind is IapKind.CONTINUOUS
        assert variant.K == 5 and variant.M == 3
        assert variant.fingerprint != desk_schema.fingerprint

        values = {**reference_values(desk_schema), "flip_angle": "12"}
        labels = encode_labels(values, variant)
        names = [d.name for d in variant.continuous]
        assert labels.continuous_targets[names.index("flip_angle")] == 12.0

    def test_non_numeric_rejected(self, desk_schema):
        with pytest.raises(SchemaError, match="non-numeric"):
            apply_regression_variant(desk_schema, ["manufacturer"])

    def test_continuous_rejected(self, desk_schema):
        with pytest.raises(SchemaError, match="already continuous"):
            apply_regression_variant(desk_schema, ["te"])

    def test_revert_restores_layout(self, full_schema):
        """Applying then reverting restores width and fingerprint exactly."""
        variant = apply_regression_variant(full_schema, ["slice_thickness", "flip_angle", "fov_computed"])
        assert variant.output_width == 96 - 21 - 4 - 27 + 3
        restored = revert_regression_variant(variant)
        assert restored.output_width == 96
        assert restored.fingerprint == full_schema.fingerprint
