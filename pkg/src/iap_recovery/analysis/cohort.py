"""Cohort statistics: per-IAP value histograms, Spearman correlation matrices, IAP-combination overlap."""
import itertools
import logging
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from ..core.schema import IapKind, IapSchema
from ..data.ingestion import SliceRecord
from ..exceptions import AnalysisError, EncodingError

logger = logging.getLogger(__name__)

OVERLAP_SCOPES = ("all", "categorical")


@dataclass(frozen=True)
class IapHistogram:
    """Observed values of one IAP in one subset, in category order (categorical) or ascending (continuous)."""

    iap: str
    values: tuple[tuple[Union[str, float], int], ...]
    subset: str = ""

    @property
    def total(self) -> int:
        return sum(count for _, count in self.values)


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    """Spearman coefficients; NaN marks entries that are undefined because a column is constant."""

    names: tuple[str, ...]
    matrix: np.ndarray

    def value(self, a: str, b: str) -> float:
        return float(self.matrix[self.names.index(a), self.names.index(b)])

    def undefined(self) -> list[tuple[str, str]]:
        rows, cols = np.where(np.isnan(self.matrix))
        return [(self.names[i], self.names[j]) for i, j in zip(rows, cols) if i <= j]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.matrix, index=list(self.names), columns=list(self.names))


@dataclass(frozen=True)
class OverlapCounts:
    """Unique IAP combinations found only in A, only in B, and in both."""

    subset_a: str
    subset_b: str
    only_a: int
    only_b: int
    both: int


def _value(record: SliceRecord, schema: IapSchema, name: str) -> Any:
    descriptor = schema.descriptor(name)
    try:
        return descriptor.parse(record.iap_values.get(name))
    except EncodingError as e:
        raise AnalysisError(f"Patient {record.patient_id} slice {record.slice_index}: {e}") from e


def value_histogram(records: Sequence[SliceRecord], iap: str, schema: IapSchema, subset: str = "") -> IapHistogram:
    """Count each observed value of one IAP.

    Raises:
        SchemaError: Unknown IAP name
        AnalysisError: A record has a missing or invalid value
    """
    descriptor = schema.descriptor(iap)
    counts = Counter(_value(r, schema, iap) for r in records)

    if descriptor.kind is IapKind.CATEGORICAL:
        ordered = [(label, counts[label]) for label in descriptor.categories if counts[label]]
    else:
        ordered = sorted(counts.items())
    return IapHistogram(iap=iap, values=tuple(ordered), subset=subset)


def histograms_frame(histograms: Sequence[IapHistogram]) -> pd.DataFrame:
    """Long-format table (subset, iap, value, count)."""
    rows = [
        {"subset": h.subset, "iap": h.iap, "value": value, "count": count} for h in histograms for value, count in h.values
    ]
    return pd.DataFrame(rows, columns=["subset", "iap", "value", "count"])


def numeric_table(records: Sequence[SliceRecord], schema: IapSchema) -> np.ndarray:
    """[N, K+M] numeric IAP table: class index for categorical, value for continuous or regressed."""
    table = np.empty((len(records), len(schema.descriptors)), dtype=np.float64)
    for i, record in enumerate(records):
        for j, descriptor in enumerate(schema.descriptors):
            try:
                table[i, j] = descriptor.numeric(record.iap_values.get(descriptor.name))
            except EncodingError as e:
                raise AnalysisError(f"Patient {record.patient_id} slice {record.slice_index}: {e}") from e
    return table


def spearman_from_table(table: np.ndarray) -> np.ndarray:
    """Spearman matrix of the columns of a numeric table (average ranks for ties)."""
    table = np.asarray(table, dtype=np.float64)
    n_rows, n_cols = table.shape
    if n_rows < 2:
        raise AnalysisError(f"Spearman correlation needs at least 2 records, got {n_rows}")

    ranks = np.column_stack([rankdata(table[:, j], method="average") for j in range(n_cols)])
    centered = ranks - ranks.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    constant = norms == 0

    matrix = np.full((n_cols, n_cols), np.nan)
    for i in range(n_cols):
        if constant[i]:
            continue
        matrix[i, i] = 1.0
        for j in range(i + 1, n_cols):
            if constant[j]:
                continue
            rho = float(np.dot(centered[:, i], centered[:, j]) / (norms[i] * norms[j]))
            matrix[i, j] = matrix[j, i] = min(1.0, max(-1.0, rho))
    return matrix


def spearman_matrix(records: Sequence[SliceRecord], schema: IapSchema) -> CorrelationMatrix:
    """Rank correlation between every pair of IAPs over a record set.

    Raises:
        AnalysisError: Fewer than 2 records, or a record with a missing value
    """
    if len(records) < 2:
        raise AnalysisError(f"Spearman correlation needs at least 2 records, got {len(records)}")
    result = CorrelationMatrix(names=schema.names, matrix=spearman_from_table(numeric_table(records, schema)))
    constant = [n for n, d in zip(result.names, np.diag(result.matrix)) if np.isnan(d)]
    if constant:
        logger.warning(f"Constant IAP column(s) {constant}: their correlations are undefined")
    return result


def _combinations(records: Sequence[SliceRecord], schema: IapSchema, names: Sequence[str]) -> set[tuple[str, ...]]:
    combos = set()
    for record in records:
        missing = [n for n in names if n not in record.iap_values]
        if missing:
            raise AnalysisError(f"Patient {record.patient_id} has no value for IAP(s) {missing}")
        key = []
        for name in names:
            descriptor = schema.descriptor(name)
            raw = str(record.iap_values[name]).strip()
            key.append(str(_value(record, schema, name)) if descriptor.kind is IapKind.CATEGORICAL else raw)
        combos.add(tuple(key))
    return combos


def combination_overlap(
    records_a: Sequence[SliceRecord],
    records_b: Sequence[SliceRecord],
    schema: IapSchema,
    scope: str = "all",
    names: tuple[str, str] = ("A", "B"),
) -> OverlapCounts:
    """Compare the sets of unique IAP tuples of two record sets.

    Args:
        records_a: First subset
        records_b: Second subset
        schema: IAPs that make up a combination
        scope: "all" uses every IAP with continuous values compared exactly as
            stored; "categorical" uses only categorical IAPs
        names: Labels for the two subsets

    Raises:
        AnalysisError: Unknown scope or records lacking schema IAPs
    """
    if scope not in OVERLAP_SCOPES:
        raise AnalysisError(f"Unknown overlap scope '{scope}'. Must be one of {OVERLAP_SCOPES}")
    iaps = [d.name for d in schema.descriptors if scope == "all" or d.kind is IapKind.CATEGORICAL]

    a = _combinations(records_a, schema, iaps)
    b = _combinations(records_b, schema, iaps)
    return OverlapCounts(subset_a=names[0], subset_b=names[1], only_a=len(a - b), only_b=len(b - a), both=len(a & b))


def overlap_table(
    subsets: Mapping[str, Sequence[SliceRecord]], schema: IapSchema, scope: str = "all"
) -> list[OverlapCounts]:
    """Overlap counts for every pair of subsets, in mapping order."""
    return [
        combination_overlap(subsets[a], subsets[b], schema, scope=scope, names=(a, b))
        for a, b in itertools.combinations(subsets, 2)
    ]


def format_overlap_table(counts: Sequence[OverlapCounts]) -> str:
    """Aligned text table with one row per subset pair."""
    frame = pd.DataFrame(
        [
            {
                "A": c.subset_a,
                "B": c.subset_b,
                "Num. in A but not B": c.only_a,
                "Num. in B but not A": c.only_b,
                "Num. in both": c.both,
            }
            for c in counts
        ]
    )
    return frame.to_string(index=False) + "\n"
