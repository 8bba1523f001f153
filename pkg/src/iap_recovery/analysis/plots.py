"""Static figures: IAP histograms per subset, correlation heatmaps, training curves, example predictions."""
import logging
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from ..core.schema import DecodedPrediction, IapKind, IapSchema, IapValue  # noqa: E402
from ..exceptions import UndefinedRelativeError  # noqa: E402
from .cohort import CorrelationMatrix, IapHistogram  # noqa: E402
from .metrics import relative_error_correct  # noqa: E402

logger = logging.getLogger(__name__)

DPI = 120
MARK_COLORS = {True: "tab:green", False: "tab:red", None: "black"}


def plot_histograms(iap: str, histograms: Sequence[IapHistogram]) -> Figure:
    """One bar panel per subset for a single IAP."""
    fig, axes = plt.subplots(1, max(1, len(histograms)), figsize=(4 * max(1, len(histograms)), 3.2), squeeze=False)
    for ax, histogram in zip(axes[0], histograms):
        labels = [str(v) for v, _ in histogram.values]
        counts = [c for _, c in histogram.values]
        ax.bar(range(len(counts)), counts, color="tab:blue")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
        ax.set_title(f"{histogram.subset or 'all'} (n={histogram.total})", fontsize=9)
    fig.suptitle(iap)
    fig.tight_layout()
    return fig


def plot_heatmap(correlations: CorrelationMatrix, title: str = "") -> Figure:
    """Spearman heatmap; undefined entries are left blank."""
    n = len(correlations.names)
    fig, ax = plt.subplots(figsize=(1.0 + 0.5 * n, 0.8 + 0.5 * n))
    image = ax.imshow(np.ma.masked_invalid(correlations.matrix), vmin=-1, vmax=1, cmap="coolwarm")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(correlations.names, rotation=60, ha="right", fontsize=7)
    ax.set_yticklabels(correlations.names, fontsize=7)
    fig.colorbar(image, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return fig


def plot_training_curve(curve: Sequence[Mapping[str, float]]) -> Figure:
    """Train and validation totals per epoch, with the running best."""
    epochs = [row["epoch"] for row in curve]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [row["train_loss"] for row in curve], label="train")
    ax.plot(epochs, [row["val_loss"] for row in curve], label="val")
    ax.plot(epochs, [row["best_val_loss"] for row in curve], linestyle="--", label="best val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    return fig

def prediction_marks(
    decoded: DecodedPrediction, truth: Mapping[str, IapValue], schema: IapSchema
) -> dict[str, Optional[bool]]:
    """Per-IAP hit or miss for one slice.

    Categorical heads hit on the exact label; regression heads hit when the
    relative error is under 2%. None marks a regression target of 0.
    """
    marks: dict[str, Optional[bool]] = {}
    for descriptor in schema.descriptors:
        predicted, true = decoded.values[descriptor.name], truth[descriptor.name]
        if descriptor.head_kind is IapKind.CATEGORICAL:
            marks[descriptor.name] = str(predicted) == str(true)
            continue
        try:
            marks[descriptor.name] = relative_error_correct(float(predicted), float(true))
        except UndefinedRelativeError:
            marks[descriptor.name] = None
    return marks


def _format_value(value: IapValue) -> str:
    return f"{value:.3g}" if isinstance(value, float) else str(value)


def plot_example_predictions(
    images: np.ndarray,
    decoded: Sequence[DecodedPrediction],
    truths: Sequence[Mapping[str, IapValue]],
    schema: IapSchema,
    columns: int = 4,
) -> Figure:
    """Grid of slices, each captioned with predicted (true) IAPs; green lines are hits, red lines misses."""
    n = len(images)
    rows = max(1, -(-n // columns))
    lines = len(schema.names)
    fig, axes = plt.subplots(rows, columns, figsize=(3.0 * columns, rows * (2.6 + 0.17 * lines)), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")

    for ax, image, prediction, truth in zip(axes.flat, images, decoded, truths):
        ax.imshow(image, cmap="gray", vmin=0, vmax=255)
        marks = prediction_marks(prediction, truth, schema)
        for i, name in enumerate(schema.names):
            ax.text(
                0.0,
                -0.04 - 0.075 * i,
                f"{name}: {_format_value(prediction.values[name])} ({_format_value(truth[name])})",
                transform=ax.transAxes,
                va="top",
                fontsize=6,
                color=MARK_COLORS[marks[name]],
            )
    fig.suptitle("predicted (true)")
    fig.tight_layout()
    return fig



def save_figure(fig: Figure, path: Union[str, Path]) -> Path:
    """Save as PNG without embedded metadata, then close."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path
