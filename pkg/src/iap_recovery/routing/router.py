"""Domain routing: pick a downstream model per image from its predicted IAPs.

ROUTE TABLE FORMAT (JSON):
    {
      "rules": [
        {"iap": "manufacturer", "op": "==", "value": "GE", "model": "GE"},
        {"when": [{"iap": "field_strength", "op": ">=", "value": 3.0},
                  {"iap": "manufacturer", "op": "in", "value": ["Siemens"]}],
         "model": "Siemens"}
      ],
      "default": "GE"
    }

Rules are tried in order; the first whose conditions all hold wins, otherwise
the default model is used.
"""
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd

from ..core.checkpoint import CHECKPOINT_NAME, Checkpoint, IapPredictor, load_checkpoint
from ..core.model import TrainConfig
from ..core.schema import IapDescriptor, IapKind, IapSchema, build_schema, decode_batch, decode_prediction
from ..core.trainer import train
from ..data.ingestion import SliceRecord, preprocess_records, split_by_patient
from ..exceptions import EncodingError, RoutingError, SchemaError, SplitError
from ..utils import derive_seed, ensure_output_dir, write_json

logger = logging.getLogger(__name__)

OPERATORS = ("==", "!=", "<", "<=", ">", ">=", "in")
DOWNSTREAM_IAP = "downstream_label"
DOWNSTREAM_CLASSES = ("negative", "positive")
DOMAIN_VAL_FRACTION = 0.2
RESULT_STEM = "routing_result"


def downstream_schema() -> IapSchema:
    """Single two-class head used by the downstream classifiers."""
    return build_schema([IapDescriptor(DOWNSTREAM_IAP, IapKind.CATEGORICAL, DOWNSTREAM_CLASSES)], name="downstream")


def _as_number(value: Any) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise RoutingError(f"Value '{value}' is not numeric") from None


def _same(a: Any, b: Any) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        try:
            return float(a) == float(b)
        except (TypeError, ValueError):
            return False
    return str(a) == str(b)


@dataclass(frozen=True)
class Condition:
    """One test on a decoded IAP value."""

    iap: str
    op: str
    value: Any

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise RoutingError(f"Unknown operator '{self.op}'. Must be one of {OPERATORS}")
        if self.op == "in":
            if not isinstance(self.value, (list, tuple)):
                raise RoutingError(f"Operator 'in' needs a list value, got {self.value!r}")
            object.__setattr__(self, "value", tuple(self.value))

    def holds(self, values: Mapping[str, Any]) -> bool:
        if self.iap not in values:
            raise RoutingError(f"No value for IAP '{self.iap}' to route on")
        actual = values[self.iap]
        if self.op == "==":
            return _same(actual, self.value)
        if self.op == "!=":
            return not _same(actual, self.value)
        if self.op == "in":
            return any(_same(actual, v) for v in self.value)

        left, right = _as_number(actual), _as_number(self.value)
        return {"<": left < right, "<=": left <= right, ">": left > right, ">=": left >= right}[self.op]

    def to_dict(self) -> dict[str, Any]:
        value = list(self.value) if isinstance(self.value, tuple) else self.value
        return {"iap": self.iap, "op": self.op, "value": value}


@dataclass(frozen=True)
class RouteRule:
    """Conjunction of conditions mapping to a model id."""

    conditions: tuple[Condition, ...]
    model: str

    def matches(self, values: Mapping[str, Any]) -> bool:
        return all(c.holds(values) for c in self.conditions)

    def to_dict(self) -> dict[str, Any]:
        if len(self.conditions) == 1:
            return {**self.conditions[0].to_dict(), "model": self.model}
        return {"when": [c.to_dict() for c in self.conditions], "model": self.model}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RouteRule":
        try:
            if "when" in data:
                conditions = tuple(Condition(c["iap"], c["op"], c["value"]) for c in data["when"])
            else:
                conditions = (Condition(data["iap"], data.get("op", "=="), data["value"]),)
            return cls(conditions=conditions, model=str(data["model"]))
        except KeyError as e:
            raise RoutingError(f"Route rule {dict(data)} lacks field {e}") from e


@dataclass(frozen=True)
class RouteTable:
    """Ordered rules plus a default model id."""

    rules: tuple[RouteRule, ...]
    default: str

    def __post_init__(self):
        if not self.default:
            raise RoutingError("Route table needs a default model id")

    @property
    def model_ids(self) -> tuple[str, ...]:
        ids = dict.fromkeys([r.model for r in self.rules] + [self.default])
        return tuple(ids)

    @property
    def iaps(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(c.iap for r in self.rules for c in r.conditions))

    def resolve(self, values: Mapping[str, Any]) -> str:
        """First matching rule's model, else the default."""
        for rule in self.rules:
            if rule.matches(values):
                return rule.model
        return self.default

    def validate(self, schema: IapSchema) -> None:
        for name in self.iaps:
            try:
                schema.descriptor(name)
            except SchemaError as e:
                raise RoutingError(f"Route table refers to unknown IAP '{name}'") from e

    def domain_assignment(self, domain_iap: str, values: Sequence[str]) -> dict[str, tuple[str, ...]]:
        """Domain values each model serves, read off the rules that test only domain_iap.

        Every value goes to the first such rule it satisfies, else to the
        default. Rules that also test other IAPs are skipped; they cannot be
        decided from the domain value alone.

        Raises:
            RoutingError: A model id would serve no domain value
        """
        rules = [r for r in self.rules if all(c.iap == domain_iap for c in r.conditions)]
        assignment: dict[str, list[str]] = {mid: [] for mid in self.model_ids}
        for value in values:
            model = next((r.model for r in rules if r.matches({domain_iap: value})), self.default)
            assignment[model].append(value)

        idle = [mid for mid, served in assignment.items() if not served]
        if idle:
            raise RoutingError(
                f"Model(s) {idle} serve no value of '{domain_iap}' by rules on '{domain_iap}' alone; "
                "give each model an equality or 'in' rule on that IAP"
            )
        return {mid: tuple(served) for mid, served in assignment.items()}

    def to_dict(self) -> dict[str, Any]:
        return {"rules": [r.to_dict() for r in self.rules], "default": self.default}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RouteTable":
        if not isinstance(data, Mapping) or not isinstance(data.get("rules"), list):
            raise RoutingError("Route table needs a 'rules' list")
        return cls(rules=tuple(RouteRule.from_dict(r) for r in data["rules"]), default=str(data.get("default", "")))

    @classmethod
    def exact_match(cls, iap: str, mapping: Mapping[str, str], default: str) -> "RouteTable":
        """One equality rule per domain value, in mapping order."""
        rules = tuple(RouteRule((Condition(iap, "==", value),), model) for value, model in mapping.items())
        return cls(rules=rules, default=default)


def load_route_table(path: Union[str, Path]) -> RouteTable:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise RoutingError(f"Route table not found: {path}") from e
    except json.JSONDecodeError as e:
        raise RoutingError(f"Route table is not valid JSON: {path}: {e}") from e
    return RouteTable.from_dict(data)


def save_route_table(table: RouteTable, path: Union[str, Path]) -> Path:
    return write_json(Path(path), table.to_dict())


def _domain_descriptor(schema: IapSchema, domain_iap: str) -> IapDescriptor:
    descriptor = schema.descriptor(domain_iap)
    if descriptor.kind is not IapKind.CATEGORICAL:
        raise RoutingError(f"Domain IAP '{domain_iap}' must be categorical")
    return descriptor


def default_route_table(schema: IapSchema, domain_iap: str) -> RouteTable:
    """Every value of the domain IAP routes to the model of the same name; the first value is the default."""
    descriptor = _domain_descriptor(schema, domain_iap)
    return RouteTable.exact_match(domain_iap, {c: c for c in descriptor.categories}, default=descriptor.categories[0])


def true_values(record: SliceRecord, schema: IapSchema) -> dict[str, Any]:
    """Ground-truth IAPs parsed like decoded predictions (category label or float)."""
    try:
        return {d.name: d.parse(record.iap_values.get(d.name)) for d in schema.descriptors}
    except EncodingError as e:
        raise RoutingError(f"Patient {record.patient_id} slice {record.slice_index}: {e}") from e


def as_downstream_records(records: Sequence[SliceRecord]) -> list[SliceRecord]:
    """Re-label records so their only IAP is the downstream class."""
    relabelled = []
    for record in records:
        if record.downstream_label is None:
            raise RoutingError(f"Patient {record.patient_id} slice {record.slice_index} has no downstream label")
        relabelled.append(replace(record, iap_values={DOWNSTREAM_IAP: DOWNSTREAM_CLASSES[record.downstream_label]}))
    return relabelled


class DownstreamClassifier:
    """Binary classifier restored from a downstream checkpoint."""

    def __init__(self, checkpoint: Checkpoint, device: Optional[str] = None):
        if checkpoint.schema.names != (DOWNSTREAM_IAP,):
            raise RoutingError(f"Checkpoint is not a downstream classifier (heads: {list(checkpoint.schema.names)})")
        self.predictor = IapPredictor(checkpoint, device=device)

    @classmethod
    def from_path(cls, path: Union[str, Path], device: Optional[str] = None) -> "DownstreamClassifier":
        return cls(load_checkpoint(path, downstream_schema()), device=device)

    @property
    def image_size(self) -> int:
        return self.predictor.image_size

    def predict_images(self, images: np.ndarray) -> np.ndarray:
        """Class indices (1 = positive) for preprocessed images [N, H, W]."""
        return np.argmax(self.predictor.predict_images(images), axis=1)

    def predict_records(self, records: Sequence[SliceRecord]) -> np.ndarray:
        return self.predict_images(preprocess_records(records, self.image_size))


def model_domains(table: RouteTable, schema: IapSchema, domain_iap: str) -> dict[str, tuple[str, ...]]:
    """Model id -> the categories of domain_iap it serves under table."""
    return table.domain_assignment(domain_iap, _domain_descriptor(schema, domain_iap).categories)


def train_domain_models(
    train_records: Sequence[SliceRecord],
    domain_iap: str,
    schema: IapSchema,
    config: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    domains: Optional[Mapping[str, Sequence[str]]] = None,
) -> dict[str, Checkpoint]:
    """Train one downstream classifier per model id on the records of the domain values it serves.

    Each model's patients are split 80/20 into fit and validation sets.

    Args:
        train_records: Labelled slices of all domains
        domain_iap: Categorical IAP that defines the domains
        schema: IAP schema the records follow
        config: Training recipe shared by all domain models
        out_dir: Optional directory; each model lands in <out_dir>/<model id>/checkpoint.pt
        domains: Model id -> domain values it serves, as from model_domains
            (default: one model per category, named after it)

    Returns:
        Model id -> best-validation checkpoint

    Raises:
        RoutingError: Non-categorical domain IAP, an unknown domain value, or a
            model with no records, a single downstream class, or too few
            patients to split
    """
    descriptor = _domain_descriptor(schema, domain_iap)
    if domains is None:
        domains = {c: (c,) for c in descriptor.categories}

    target_schema = downstream_schema()
    models: dict[str, Checkpoint] = {}
    for i, (model_id, values) in enumerate(domains.items()):
        try:
            served = {descriptor.parse(v) for v in values}
        except EncodingError as e:
            raise RoutingError(f"Model '{model_id}': {e}") from e

        members = [r for r in train_records if _domain_value(r, descriptor) in served]
        if not members:
            raise RoutingError(f"Model '{model_id}' ({domain_iap} in {sorted(served)}) has no training records")
        labels = {r.downstream_label for r in members}
        if labels != {0, 1}:
            raise RoutingError(f"Model '{model_id}' needs both downstream classes, found {sorted(labels, key=str)}")

        try:
            split = split_by_patient(
                as_downstream_records(members),
                (1 - DOMAIN_VAL_FRACTION, DOMAIN_VAL_FRACTION, 0.0),
                seed=derive_seed(config.seed, i),
            )
        except SplitError as e:
            raise RoutingError(f"Model '{model_id}': {e}") from e

        logger.info(f"Training downstream model {model_id} ({domain_iap} in {sorted(served)}) on {len(split.train)} slices")
        target_dir = Path(out_dir) / model_id if out_dir is not None else None
        models[model_id] = train(config, target_schema, split.train, split.val, out_dir=target_dir)

    logger.info(f"✓ Trained {len(models)} domain models")
    return models


def _domain_value(record: SliceRecord, descriptor: IapDescriptor) -> Optional[str]:
    try:
        return descriptor.parse(record.iap_values.get(descriptor.name))
    except EncodingError:
        return None


def load_domain_models(models_dir: Union[str, Path], model_ids: Sequence[str]) -> dict[str, Checkpoint]:
    """Load <models_dir>/<id>/checkpoint.pt for every id."""
    return {mid: load_checkpoint(Path(models_dir) / mid / CHECKPOINT_NAME, downstream_schema()) for mid in model_ids}


def route(image: np.ndarray, predictor: IapPredictor, table: RouteTable) -> str:
    """Model id for one preprocessed image [H, W], from a single forward pass of the IAP model."""
    raw = predictor.predict_images(np.asarray(image)[None])[0]
    return table.resolve(decode_prediction(raw, predictor.schema).values)


def route_records(records: Sequence[SliceRecord], predictor: IapPredictor, table: RouteTable) -> list[str]:
    """Batched route() over records."""
    return [table.resolve(d.values) for d in decode_batch(predictor.predict_records(records), predictor.schema)]


@dataclass(frozen=True)
class RoutingExperimentResult:
    """Downstream accuracies under fixed, predicted-IAP and true-IAP model choice."""

    fixed_accuracy: dict[str, float]
    in_domain_accuracy: dict[str, Optional[float]]
    routed_accuracy: float
    oracle_accuracy: float
    domain_key_accuracy: Optional[float]
    n_samples: int
    domain_iap: str = ""
    domain_values: dict[str, tuple[str, ...]] = field(default_factory=dict)
    routed_models: tuple[str, ...] = field(default_factory=tuple)
    oracle_models: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict[str, Any]:
        return {
            "domain_iap": self.domain_iap,
            "n_samples": self.n_samples,
            "fixed_accuracy": dict(self.fixed_accuracy),
            "domain_values": {mid: list(values) for mid, values in self.domain_values.items()},
            "in_domain_accuracy": dict(self.in_domain_accuracy),
            "routed_accuracy": self.routed_accuracy,
            "oracle_accuracy": self.oracle_accuracy,
            "domain_key_accuracy": self.domain_key_accuracy,
        }


def _table_domains(table: RouteTable, schema: IapSchema, domain_iap: str) -> Optional[dict[str, tuple[str, ...]]]:
    if domain_iap not in schema.names:
        return None
    try:
        return model_domains(table, schema, domain_iap)
    except RoutingError as e:
        logger.warning(f"⚠ In-domain accuracy undefined: {e}")
        return None


def run_routing_experiment(
    test_records: Sequence[SliceRecord],
    predictor: IapPredictor,
    domain_models: Mapping[str, Union[Checkpoint, DownstreamClassifier]],
    table: RouteTable,
    domain_iap: Optional[str] = None,
    domains: Optional[Mapping[str, Sequence[str]]] = None,
) -> RoutingExperimentResult:
    """Compare fixed, predicted-IAP and oracle model selection on labelled test slices.

    In-domain accuracy scores each model on the slices whose true domain_iap
    value it serves. That map comes from domains or, when omitted, from the
    table's rules on domain_iap (see RouteTable.domain_assignment); if neither
    gives one, in-domain accuracy is left undefined.

    Raises:
        RoutingError: Empty test set, unlabelled records, or a table naming an unknown model
    """
    if not test_records:
        raise RoutingError("Routing experiment needs a non-empty test set")
    missing = [m for m in table.model_ids if m not in domain_models]
    if missing:
        raise RoutingError(f"Route table names model(s) {missing} with no checkpoint")
    table.validate(predictor.schema)

    as_downstream_records(test_records)
    labels = np.array([r.downstream_label for r in test_records])
    classifiers = {
        mid: m if isinstance(m, DownstreamClassifier) else DownstreamClassifier(m) for mid, m in domain_models.items()
    }

    images_by_size: dict[int, np.ndarray] = {}
    predictions: dict[str, np.ndarray] = {}
    for mid, classifier in classifiers.items():
        size = classifier.image_size
        if size not in images_by_size:
            images_by_size[size] = preprocess_records(test_records, size)
        predictions[mid] = classifier.predict_images(images_by_size[size])

    schema = predictor.schema
    domain_iap = domain_iap or (table.iaps[0] if table.iaps else "")
    truths = [true_values(r, schema) for r in test_records]
    decoded = decode_batch(predictor.predict_records(test_records), schema)
    routed = [table.resolve(d.values) for d in decoded]
    oracle = [table.resolve(t) for t in truths]

    def accuracy(chosen: Sequence[str]) -> float:
        picks = np.array([predictions[m][i] for i, m in enumerate(chosen)])
        return float(np.mean(picks == labels))

    fixed = {mid: float(np.mean(p == labels)) for mid, p in predictions.items()}
    if domains is None:
        domains = _table_domains(table, schema, domain_iap)
    served = {mid: {str(v) for v in values} for mid, values in (domains or {}).items()}
    in_domain: dict[str, Optional[float]] = {}
    for mid, p in predictions.items():
        mask = np.array([domain_iap in t and str(t[domain_iap]) in served.get(mid, ()) for t in truths])
        in_domain[mid] = float(np.mean(p[mask] == labels[mask])) if mask.any() else None

    key_accuracy = None
    if domain_iap and domain_iap in schema.names:
        key_accuracy = float(np.mean([str(d.values[domain_iap]) == str(t[domain_iap]) for d, t in zip(decoded, truths)]))

    result = RoutingExperimentResult(
        fixed_accuracy=fixed,
        in_domain_accuracy=in_domain,
        routed_accuracy=accuracy(routed),
        oracle_accuracy=accuracy(oracle),
        domain_key_accuracy=key_accuracy,
        n_samples=len(test_records),
        domain_iap=domain_iap,
        domain_values={mid: tuple(values) for mid, values in (domains or {}).items()},
        routed_models=tuple(routed),
        oracle_models=tuple(oracle),
    )
    logger.info(f"✓ Routed {result.n_samples} slices: routed {result.routed_accuracy:.4f}, oracle {result.oracle_accuracy:.4f}")
    return result


def format_routing_table(result: RoutingExperimentResult) -> str:
    """Aligned text comparison: fixed models on all data and on their own domain, then routed and oracle choice."""

    def percent(value: Optional[float]) -> str:
        return "N/A" if value is None else f"{100 * value:.2f}%"

    rows = [{"Model": f"{mid} model, all images", "Accuracy": percent(a)} for mid, a in result.fixed_accuracy.items()]
    rows += [
        {"Model": f"{mid} model, {'/'.join(result.domain_values.get(mid, ()))} images only", "Accuracy": percent(a)}
        for mid, a in result.in_domain_accuracy.items()
        if mid in result.domain_values
    ]
    rows.append({"Model": "Model chosen according to predicted IAPs", "Accuracy": percent(result.routed_accuracy)})
    rows.append({"Model": "Model chosen according to true IAPs", "Accuracy": percent(result.oracle_accuracy)})

    lines = [pd.DataFrame(rows).to_string(index=False)]
    if result.domain_key_accuracy is not None:
        lines.append(f"{result.domain_iap} prediction accuracy: {percent(result.domain_key_accuracy)}")
    lines.append(f"Samples: {result.n_samples}")
    return "\n".join(lines) + "\n"


def write_routing_result(result: RoutingExperimentResult, out_dir: Union[str, Path]) -> list[Path]:
    out_dir = ensure_output_dir(Path(out_dir))
    json_path = write_json(out_dir / f"{RESULT_STEM}.json", result.to_dict())
    txt_path = out_dir / f"{RESULT_STEM}.txt"
    txt_path.write_text(format_routing_table(result))
    return [json_path, txt_path]
