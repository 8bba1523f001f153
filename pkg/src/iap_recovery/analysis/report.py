"""Per-IAP evaluation report: one row per head, rendered as JSON, CSV and an aligned text table."""
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd

from ..core.checkpoint import Checkpoint, IapPredictor
from ..core.schema import IapKind, IapSchema, LabelVector, encode_labels, rank_heads
from ..data.ingestion import SliceRecord
from ..exceptions import EvaluationError, SchemaMismatchError
from ..utils import ensure_output_dir, write_json
from .metrics import head_mse, topk_accuracy, within_relative_error

logger = logging.getLogger(__name__)

REPORT_STEM = "eval_report"
NOT_APPLICABLE = "N/A"
REGRESSED_MARKER = "*"


@dataclass(frozen=True)
class EvalRow:
    iap: str
    head: str
    n_categories: Optional[int]
    top1: Optional[float] = None
    top2: Optional[float] = None
    mse: Optional[float] = None
    within_2pct: Optional[float] = None
    regressed: bool = False
    unit: str = ""


@dataclass(frozen=True)
class EvalReport:
    """Metrics for every head of a schema on one test set."""

    rows: tuple[EvalRow, ...]
    n_samples: int
    fingerprint: str
    schema_name: str = ""

    def row(self, iap: str) -> EvalRow:
        for row in self.rows:
            if row.iap == iap:
                return row
        raise EvaluationError(f"No report row for IAP '{iap}'")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_name": self.schema_name,
            "fingerprint": self.fingerprint,
            "n_samples": self.n_samples,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows])


def _label_arrays(labels: Sequence[LabelVector], schema: IapSchema) -> tuple[np.ndarray, np.ndarray]:
    categorical = np.asarray([lv.categorical_targets for lv in labels], dtype=np.int64).reshape(len(labels), schema.K)
    continuous = np.asarray([lv.continuous_targets for lv in labels], dtype=np.float64).reshape(len(labels), schema.M)
    return categorical, continuous


def build_report_from_predictions(
    raw: np.ndarray,
    labels: Sequence[LabelVector],
    schema: IapSchema,
    fingerprint: Optional[str] = None,
) -> EvalReport:
    """Aggregate metrics from raw outputs [N, width] and encoded labels.

    Raises:
        EvaluationError: Empty test set or prediction/label count mismatch
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    if len(labels) == 0:
        raise EvaluationError("Cannot build a report for an empty test set")
    if raw.shape[0] != len(labels):
        raise EvaluationError(f"{raw.shape[0]} predictions but {len(labels)} label vectors")

    categorical, continuous = _label_arrays(labels, schema)
    rankings = rank_heads(raw, schema)

    rows = []
    for descriptor in schema.descriptors:
        if descriptor.head_kind is IapKind.CATEGORICAL:
            k = schema.categorical.index(descriptor)
            ranked, truth = rankings[descriptor.name], categorical[:, k]
            n = len(descriptor.categories)
            rows.append(
                EvalRow(
                    iap=descriptor.name,
                    head="categorical",
                    n_categories=n,
                    top1=topk_accuracy(ranked, truth, 1),
                    top2=topk_accuracy(ranked, truth, 2) if n > 2 else None,
                    unit=descriptor.unit,
                )
            )
            continue

        m = schema.continuous.index(descriptor)
        predicted = raw[:, schema.head_slice(descriptor.name).start]
        truth = continuous[:, m]
        within = None
        if np.all(truth != 0):
            within = within_relative_error(predicted, truth)
        else:
            logger.warning(f"IAP '{descriptor.name}' has zero-valued targets; relative-error rate not reported")
        rows.append(
            EvalRow(
                iap=descriptor.name,
                head="continuous",
                n_categories=descriptor.n_categories,
                mse=head_mse(predicted, truth),
                within_2pct=within,
                regressed=descriptor.treat_as_continuous,
                unit=descriptor.unit,
            )
        )

    return EvalReport(
        rows=tuple(rows),
        n_samples=len(labels),
        fingerprint=fingerprint or schema.fingerprint,
        schema_name=schema.name,
    )


def build_report(
    checkpoint: Checkpoint,
    records: Sequence[SliceRecord],
    schema: IapSchema,
    device: Optional[str] = None,
) -> EvalReport:
    """Decode every test slice with the checkpoint and aggregate per-head metrics.

    Raises:
        SchemaMismatchError: Checkpoint trained on a different schema
        EvaluationError: Empty test set
    """
    if checkpoint.fingerprint != schema.fingerprint:
        raise SchemaMismatchError(
            f"Checkpoint schema {checkpoint.fingerprint[:12]} does not match evaluation schema {schema.fingerprint[:12]}"
        )
    if not records:
        raise EvaluationError("Cannot build a report for an empty test set")

    labels = [encode_labels(r.iap_values, schema) for r in records]
    raw = IapPredictor(checkpoint, device=device).predict_records(records)
    report = build_report_from_predictions(raw, labels, schema, checkpoint.fingerprint)
    logger.info(f"✓ Evaluated {report.n_samples} slices over {len(report.rows)} heads")
    return report


def _percent(value: Optional[float]) -> str:
    return NOT_APPLICABLE if value is None else f"{100 * value:.2f}%"


def format_report(report: EvalReport) -> str:
    """Aligned text table: IAP, No. categories, Top-1, Top-2, MSE, share under 2% relative error."""
    table = []
    for row in report.rows:
        marker = REGRESSED_MARKER if row.regressed else ""
        unit = f" {row.unit}^2" if row.unit else ""
        if row.head == "categorical":
            table.append(
                {
                    "IAP": row.iap,
                    "No. categories": row.n_categories,
                    "Top-1": _percent(row.top1),
                    "Top-2": _percent(row.top2),
                    "MSE": "",
                    "<2% rel. err": "",
                }
            )
        else:
            table.append(
                {
                    "IAP": row.iap + marker,
                    "No. categories": row.n_categories if row.n_categories is not None else "-",
                    "Top-1": "",
                    "Top-2": "",
                    "MSE": f"{row.mse:.4g}{unit}",
                    "<2% rel. err": _percent(row.within_2pct) if row.within_2pct is not None else "",
                }
            )

    lines = [
        f"Schema: {report.schema_name or '-'} ({report.fingerprint[:12]})  Samples: {report.n_samples}",
        pd.DataFrame(table).to_string(index=False),
    ]
    if any(r.regressed for r in report.rows):
        lines.append(f"{REGRESSED_MARKER} categorical IAP trained as continuous; MSE in label units")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir: Union[str, Path], stem: str = REPORT_STEM) -> list[Path]:
    """Write <stem>.json, <stem>.csv and <stem>.txt."""
    out_dir = ensure_output_dir(Path(out_dir))
    json_path = write_json(out_dir / f"{stem}.json", report.to_dict())
    csv_path = out_dir / f"{stem}.csv"
    report.to_frame().to_csv(csv_path, index=False, float_format="%.10g")
    txt_path = out_dir / f"{stem}.txt"
    txt_path.write_text(format_report(report))
    return [json_path, csv_path, txt_path]
