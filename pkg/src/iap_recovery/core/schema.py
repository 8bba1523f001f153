"""IAP schema: descriptors, label encoding and the flat output-vector layout.

The schema is the single source of truth for how a model's final layer is
laid out. Heads follow descriptor declaration order; a categorical head is
C_k units wide, a continuous head (or a categorical IAP trained under the
regression variant) is one unit wide.
"""
import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from ..exceptions import EncodingError, SchemaError
from ..utils import sha256_json

logger = logging.getLogger(__name__)

DESK_SCHEMA = "desk_reduced.json"
FULL_SCHEMA = "full_cardinality.json"

IapValue = Union[str, float]


class IapKind(str, Enum):
    """Kind of an acquisition parameter."""

    CATEGORICAL = "categorical"
    CONTINUOUS = "continuous"


def _is_number(label: str) -> bool:
    try:
        return math.isfinite(float(label))
    except ValueError:
        return False


@dataclass(frozen=True)
class IapDescriptor:
    """One acquisition parameter. Immutable."""

    name: str
    kind: IapKind
    categories: tuple[str, ...] = ()
    unit: str = ""
    treat_as_continuous: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", IapKind(self.kind))
        object.__setattr__(self, "categories", tuple(str(c) for c in self.categories))

        if not self.name:
            raise SchemaError("IAP descriptor needs a non-empty name")

        if self.kind is IapKind.CATEGORICAL:
            if len(self.categories) < 2:
                raise SchemaError(f"Categorical IAP '{self.name}' needs at least 2 categories, got {len(self.categories)}")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"Categorical IAP '{self.name}' has duplicate category labels")
            if self.treat_as_continuous and not self.is_numeric:
                raise SchemaError(f"IAP '{self.name}' cannot be regressed: category labels are not all numeric")
        else:
            if self.categories:
                raise SchemaError(f"Continuous IAP '{self.name}' must not declare categories")
            if self.treat_as_continuous:
                raise SchemaError(f"treat_as_continuous only applies to categorical IAPs ('{self.name}')")

    @property
    def is_numeric(self) -> bool:
        """All category labels parse as finite numbers."""
        return bool(self.categories) and all(_is_number(c) for c in self.categories)

    @property
    def head_kind(self) -> IapKind:
        """Kind of the model head serving this IAP."""
        if self.kind is IapKind.CONTINUOUS or self.treat_as_continuous:
            return IapKind.CONTINUOUS
        return IapKind.CATEGORICAL

    @property
    def head_width(self) -> int:
        return 1 if self.head_kind is IapKind.CONTINUOUS else len(self.categories)

    @property
    def n_categories(self) -> Optional[int]:
        return len(self.categories) if self.kind is IapKind.CATEGORICAL else None

    def category_index(self, label: Any) -> int:
        """Class index of a category label."""
        try:
            return self.categories.index(str(label).strip())
        except ValueError:
            raise EncodingError(
                f"Unknown category '{label}' for IAP '{self.name}'. Expected one of {list(self.categories)}"
            ) from None

    def parse(self, raw: Any) -> IapValue:
        """Parse a raw manifest value: category label for categorical, float for continuous."""
        if raw is None or (isinstance(raw, str) and not raw.strip()):
            raise EncodingError(f"Missing value for IAP '{self.name}'")

        if self.kind is IapKind.CATEGORICAL:
            return self.categories[self.category_index(raw)]

        try:
            value = float(raw)
        except (TypeError, ValueError):
            raise EncodingError(f"IAP '{self.name}' expects a number, got '{raw}'") from None
        if not math.isfinite(value):
            raise EncodingError(f"IAP '{self.name}' value is not finite: {raw}")
        return value

    def numeric(self, raw: Any) -> float:
        """Numeric form used for statistics: class index, label value (regressed) or native value."""
        value = self.parse(raw)
        if self.kind is IapKind.CONTINUOUS:
            return float(value)
        if self.treat_as_continuous:
            return float(value)
        return float(self.category_index(value))

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"name": self.name, "kind": self.kind.value}
        if self.kind is IapKind.CATEGORICAL:
            data["categories"] = list(self.categories)
            data["treat_as_continuous"] = self.treat_as_continuous
        if self.unit:
            data["unit"] = self.unit
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "IapDescriptor":
        try:
            return cls(
                name=data["name"],
                kind=data["kind"],
                categories=tuple(data.get("categories", ())),
                unit=data.get("unit", ""),
                treat_as_continuous=bool(data.get("treat_as_continuous", False)),
            )
        except KeyError as e:
            raise SchemaError(f"Descriptor entry missing field {e}") from e
        except ValueError as e:
            raise SchemaError(f"Invalid descriptor entry {dict(data)}: {e}") from e


@dataclass(frozen=True)
class IapSchema:
    """Ordered descriptors plus the head layout they induce. Build with build_schema()."""

    descriptors: tuple[IapDescriptor, ...]
    head_offsets: tuple[int, ...]
    name: str = ""

    def __post_init__(self):
        if len(self.head_offsets) != len(self.descriptors):
            raise SchemaError("head_offsets must have one entry per descriptor")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.descriptors)

    @property
    def categorical(self) -> tuple[IapDescriptor, ...]:
        """Descriptors served by a categorical head, in declaration order."""
        return tuple(d for d in self.descriptors if d.head_kind is IapKind.CATEGORICAL)

    @property
    def continuous(self) -> tuple[IapDescriptor, ...]:
        """Descriptors served by a single-unit regression head, in declaration order."""
        return tuple(d for d in self.descriptors if d.head_kind is IapKind.CONTINUOUS)

    @property
    def K(self) -> int:  # noqa: N802
        return len(self.categorical)

    @property
    def M(self) -> int:  # noqa: N802
        return len(self.continuous)

    @property
    def output_width(self) -> int:
        return sum(d.head_width for d in self.descriptors)

    @property
    def fingerprint(self) -> str:
        return sha256_json([d.to_dict() for d in self.descriptors])

    def descriptor(self, name: str) -> IapDescriptor:
        for descriptor in self.descriptors:
            if descriptor.name == name:
                return descriptor
        raise SchemaError(f"Unknown IAP '{name}'. Schema has {list(self.names)}")

    def head_slice(self, name: str) -> slice:
        index = self.names.index(self.descriptor(name).name)
        offset = self.head_offsets[index]
        return slice(offset, offset + self.descriptors[index].head_width)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "output_width": self.output_width,
            "descriptors": [d.to_dict() for d in self.descriptors],
        }


def build_schema(descriptors: Iterable[IapDescriptor], name: str = "") -> IapSchema:
    """Assign contiguous head offsets in declaration order.

    Raises:
        SchemaError: On duplicate IAP names or an empty descriptor list
    """
    descriptors = tuple(descriptors)
    if not descriptors:
        raise SchemaError("Schema needs at least one IAP descriptor")

    seen = set()
    for descriptor in descriptors:
        if descriptor.name in seen:
            raise SchemaError(f"Duplicate IAP name: {descriptor.name}")
        seen.add(descriptor.name)

    offsets = []
    offset = 0
    for descriptor in descriptors:
        offsets.append(offset)
        offset += descriptor.head_width

    return IapSchema(descriptors=descriptors, head_offsets=tuple(offsets), name=name)


def schema_from_dict(data: Mapping[str, Any]) -> IapSchema:
    """Build a schema from its JSON form, verifying a declared output width."""
    entries = data.get("descriptors")
    if not isinstance(entries, list):
        raise SchemaError("Schema document needs a 'descriptors' list")

    schema = build_schema((IapDescriptor.from_dict(entry) for entry in entries), name=data.get("name", ""))

    declared = data.get("output_width")
    if declared is not None and int(declared) != schema.output_width:
        raise SchemaError(f"Schema declares output width {declared} but descriptors give {schema.output_width}")
    return schema


def load_schema(path: Union[str, Path]) -> IapSchema:
    """Load a schema document from disk."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise SchemaError(f"Schema file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise SchemaError(f"Schema file is not valid JSON: {path}: {e}") from e

    schema = schema_from_dict(data)
    logger.debug(f"Loaded schema {schema.name or path.name}: K={schema.K}, M={schema.M}, width={schema.output_width}")
    return schema


def load_bundled_schema(filename: str = DESK_SCHEMA) -> IapSchema:
    """Load one of the schema assets shipped with the package."""
    asset = resources.files("iap_recovery").joinpath("schemas", filename)
    try:
        return schema_from_dict(json.loads(asset.read_text()))
    except FileNotFoundError as e:
        raise SchemaError(f"No bundled schema named {filename}") from e


def save_schema(schema: IapSchema, path: Union[str, Path], comment: str = "") -> Path:
    """Write a schema document; the width is recorded in the header comment."""
    path = Path(path)
    data = {
        "comment": comment or f"Output layer width {schema.output_width} (K={schema.K}, M={schema.M}).",
        **schema.to_dict(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n")
    return path


@dataclass(frozen=True)
class LabelVector:
    """Encoded targets: class indices for categorical heads, native values for continuous heads."""

    categorical_targets: tuple[int, ...]
    continuous_targets: tuple[float, ...]


def encode_labels(raw_values: Mapping[str, Any], schema: IapSchema) -> LabelVector:
    """Encode a name->value map against the schema.

    Raises:
        EncodingError: On a missing IAP, an unknown category or a non-finite continuous value
    """
    categorical = []
    continuous = []
    for descriptor in schema.descriptors:
        if descriptor.name not in raw_values:
            raise EncodingError(f"Missing IAP '{descriptor.name}'")
        value = descriptor.parse(raw_values[descriptor.name])

        if descriptor.head_kind is IapKind.CATEGORICAL:
            categorical.append(descriptor.category_index(value))
        else:
            continuous.append(float(value))

    return LabelVector(categorical_targets=tuple(categorical), continuous_targets=tuple(continuous))


@dataclass(frozen=True, eq=False)
class PredictionVector:
    """Raw model output for one image, laid out per the schema."""

    raw: np.ndarray
    schema: IapSchema

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64).reshape(-1)
        if raw.shape[0] != self.schema.output_width:
            raise EncodingError(f"Prediction has {raw.shape[0]} units, schema expects {self.schema.output_width}")
        raw.setflags(write=False)
        object.__setattr__(self, "raw", raw)

    def logits(self, name: str) -> np.ndarray:
        """Logit slice of a categorical head."""
        descriptor = self.schema.descriptor(name)
        if descriptor.head_kind is not IapKind.CATEGORICAL:
            raise EncodingError(f"IAP '{name}' has a regression head, not logits")
        return self.raw[self.schema.head_slice(name)]

    def value(self, name: str) -> float:
        """Scalar output of a regression head."""
        descriptor = self.schema.descriptor(name)
        if descriptor.head_kind is not IapKind.CONTINUOUS:
            raise EncodingError(f"IAP '{name}' has a categorical head, not a scalar")
        return float(self.raw[self.schema.head_slice(name)][0])


@dataclass(frozen=True)
class DecodedPrediction:
    """Decoded IAP values plus ranked category indices per categorical head."""

    values: dict[str, IapValue]
    rankings: dict[str, tuple[int, ...]] = field(default_factory=dict)


def rank_logits(logits: np.ndarray) -> np.ndarray:
    """Category indices by descending logit along the last axis; ties keep the lower index first."""
    return np.argsort(-np.asarray(logits, dtype=np.float64), axis=-1, kind="stable")


def rank_heads(raw: np.ndarray, schema: IapSchema) -> dict[str, np.ndarray]:
    """Ranked category indices [N, C_k] for every categorical head of a [N, width] batch."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    if raw.shape[1] != schema.output_width:
        raise EncodingError(f"Prediction has {raw.shape[1]} units, schema expects {schema.output_width}")
    return {d.name: rank_logits(raw[:, schema.head_slice(d.name)]) for d in schema.categorical}


def decode_prediction(pred: Union[PredictionVector, np.ndarray], schema: IapSchema) -> DecodedPrediction:
    """Decode one prediction: argmax category per categorical head, scalar per regression head.

    Raises:
        EncodingError: If the prediction length does not match the schema width
    """
    raw = pred.raw if isinstance(pred, PredictionVector) else np.asarray(pred, dtype=np.float64).reshape(-1)
    if raw.shape[0] != schema.output_width:
        raise EncodingError(f"Prediction has {raw.shape[0]} units, schema expects {schema.output_width}")

    values: dict[str, IapValue] = {}
    rankings: dict[str, tuple[int, ...]] = {}
    for descriptor in schema.descriptors:
        head = raw[schema.head_slice(descriptor.name)]
        if descriptor.head_kind is IapKind.CATEGORICAL:
            ranking = tuple(int(i) for i in rank_logits(head))
            rankings[descriptor.name] = ranking
            values[descriptor.name] = descriptor.categories[ranking[0]]
        else:
            values[descriptor.name] = float(head[0])

    return DecodedPrediction(values=values, rankings=rankings)


def decode_batch(raw: np.ndarray, schema: IapSchema) -> list[DecodedPrediction]:
    """Decode a [N, width] batch."""
    return [decode_prediction(row, schema) for row in np.atleast_2d(raw)]


def one_hot(labels: LabelVector, schema: IapSchema) -> PredictionVector:
    """Exact prediction vector for labels: one-hot logits, continuous values verbatim."""
    raw = np.zeros(schema.output_width, dtype=np.float64)
    for descriptor, target in zip(schema.categorical, labels.categorical_targets):
        raw[schema.head_slice(descriptor.name).start + target] = 1.0
    for descriptor, target in zip(schema.continuous, labels.continuous_targets):
        raw[schema.head_slice(descriptor.name).start] = target
    return PredictionVector(raw=raw, schema=schema)


def apply_regression_variant(schema: IapSchema, names: Sequence[str]) -> IapSchema:
    """Train the named categorical IAPs as width-1 regression heads on their numeric labels.

    Raises:
        SchemaError: If a name is unknown, not categorical, or has non-numeric labels
    """
    targets = set(names)
    for name in targets:
        descriptor = schema.descriptor(name)
        if descriptor.kind is not IapKind.CATEGORICAL:
            raise SchemaError(f"IAP '{name}' is already continuous")
        if not descriptor.is_numeric:
            raise SchemaError(f"IAP '{name}' has non-numeric category labels and cannot be regressed")

    descriptors = [replace(d, treat_as_continuous=True) if d.name in targets else d for d in schema.descriptors]
    return build_schema(descriptors, name=schema.name)


def revert_regression_variant(schema: IapSchema, names: Optional[Sequence[str]] = None) -> IapSchema:
    """Restore categorical heads for the named IAPs (default: all regressed IAPs)."""
    targets = set(names) if names is not None else {d.name for d in schema.descriptors if d.treat_as_continuous}
    for name in targets:
        schema.descriptor(name)

    descriptors = [replace(d, treat_as_continuous=False) if d.name in targets else d for d in schema.descriptors]
    return build_schema(descriptors, name=schema.name)
