"""Per-head metrics: top-k accuracy, MSE and the relative-error hit rule."""
import logging
from collections.abc import Sequence

import numpy as np

from ..exceptions import EvaluationError, UndefinedRelativeError

logger = logging.getLogger(__name__)

RELATIVE_ERROR_THRESHOLD = 0.02


def topk_accuracy(ranked: np.ndarray, true_labels: Sequence[int], k: int) -> float:
    """Fraction of samples whose true class is among the first k ranked categories.

    Args:
        ranked: [N, C] category indices, best first (see schema.rank_logits)
        true_labels: [N] true class indices
        k: Cut-off, 1 <= k <= C

    Raises:
        EvaluationError: k out of range, length mismatch or empty input
    """
    ranked = np.atleast_2d(np.asarray(ranked))
    true_labels = np.asarray(true_labels).reshape(-1)
    n_classes = ranked.shape[1]
    if not 1 <= k <= n_classes:
        raise EvaluationError(f"k must be between 1 and {n_classes}, got {k}")
    if ranked.shape[0] != true_labels.shape[0]:
        raise EvaluationError(f"{ranked.shape[0]} rankings but {true_labels.shape[0]} labels")
    if ranked.shape[0] == 0:
        raise EvaluationError("Cannot compute accuracy of an empty set")

    hits = (ranked[:, :k] == true_labels[:, None]).any(axis=1)
    return float(hits.mean())


def head_mse(predictions: Sequence[float], true_values: Sequence[float]) -> float:
    """Mean squared error in the target's native units."""
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    true_values = np.asarray(true_values, dtype=np.float64).reshape(-1)
    if predictions.size == 0:
        raise EvaluationError("Cannot compute MSE of an empty set")
    if predictions.shape != true_values.shape:
        raise EvaluationError(f"{predictions.size} predictions but {true_values.size} true values")
    if not (np.isfinite(predictions).all() and np.isfinite(true_values).all()):
        raise EvaluationError("MSE inputs must be finite")
    return float(np.mean((predictions - true_values) ** 2))


def relative_error_correct(pred: float, true: float, threshold: float = RELATIVE_ERROR_THRESHOLD) -> bool:
    """|pred - true| / |true| < threshold. The boundary itself counts as wrong."""
    if true == 0:
        raise UndefinedRelativeError("Relative error is undefined for a true value of 0")
    return abs(pred - true) / abs(true) < threshold


def within_relative_error(
    predictions: Sequence[float], true_values: Sequence[float], threshold: float = RELATIVE_ERROR_THRESHOLD
) -> float:
    """Fraction of predictions that pass relative_error_correct."""
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    true_values = np.asarray(true_values, dtype=np.float64).reshape(-1)
    if predictions.size == 0 or predictions.shape != true_values.shape:
        raise EvaluationError("Need equally long, non-empty prediction and value lists")
    hits = [relative_error_correct(p, t, threshold) for p, t in zip(predictions, true_values)]
    return float(np.mean(hits))
