"""Checkpoint archive: weights, schema, fingerprint, config snapshot and training curve.

The archive is validated on read, the same way a backup is verified before
it is restored: the stored fingerprint must match the stored schema, and the
caller's schema when one is given.
"""
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import torch

from ..data.ingestion import SliceRecord, preprocess_records
from ..exceptions import CheckpointError, ModelError, SchemaError, SchemaMismatchError
from .model import PredictorModel, TrainConfig, resolve_device
from .schema import DecodedPrediction, IapSchema, decode_batch, schema_from_dict

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.pt"


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Best-validation model state. Immutable once written."""

    state_dict: dict[str, torch.Tensor]
    schema: IapSchema
    config: TrainConfig
    best_val_loss: float
    epoch: int
    curve: tuple[dict[str, float], ...] = field(default_factory=tuple)

    @property
    def fingerprint(self) -> str:
        return self.schema.fingerprint

    def to_archive(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "state_dict": self.state_dict,
            "schema": self.schema.to_dict(),
            "fingerprint": self.fingerprint,
            "config": self.config.to_dict(),
            "best_val_loss": float(self.best_val_loss),
            "epoch": int(self.epoch),
            "curve": [dict(row) for row in self.curve],
        }

    def build_model(self, device: Optional[str] = None) -> PredictorModel:
        """Instantiate the network with these weights, in eval mode."""
        model = PredictorModel(
            self.schema, backbone=self.config.backbone, image_size=self.config.image_size, pretrained=False
        )
        try:
            model.load_state_dict(self.state_dict)
        except RuntimeError as e:
            raise CheckpointError(f"Checkpoint weights do not fit the model: {e}") from e
        return model.to(resolve_device(device)).eval()


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint.to_archive(), path)
    logger.debug(f"Saved checkpoint (epoch {checkpoint.epoch}, val {checkpoint.best_val_loss:.6f}) to {path}")
    return path


def load_checkpoint(path: Union[str, Path], schema: Optional[IapSchema] = None) -> Checkpoint:
    """Load and verify a checkpoint.

    Args:
        path: Archive written by save_checkpoint
        schema: If given, the checkpoint must have been trained against it

    Raises:
        CheckpointError: Missing, unreadable or internally inconsistent archive
        SchemaMismatchError: Fingerprint differs from the given schema
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")

    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    if not isinstance(archive, dict) or archive.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format: {path}")

    try:
        stored_schema = schema_from_dict(archive["schema"])
        config = TrainConfig.from_dict(archive["config"])
    except (KeyError, SchemaError, ModelError) as e:
        raise CheckpointError(f"Checkpoint {path} has an invalid schema or config: {e}") from e

    if stored_schema.fingerprint != archive.get("fingerprint"):
        raise CheckpointError(f"Checkpoint {path} is corrupt: stored fingerprint does not match its schema")

    if schema is not None and schema.fingerprint != stored_schema.fingerprint:
        raise SchemaMismatchError(
            f"Checkpoint {path} was trained on schema {stored_schema.fingerprint[:12]}, "
            f"not {schema.fingerprint[:12]} ({stored_schema.output_width} vs {schema.output_width} units)"
        )

    return Checkpoint(
        state_dict=archive["state_dict"],
        schema=stored_schema,
        config=config,
        best_val_loss=float(archive["best_val_loss"]),
        epoch=int(archive["epoch"]),
        curve=tuple(archive.get("curve", [])),
    )


class IapPredictor:
    """Loaded IAP model: preprocessed slices or records in, raw outputs or decoded values out."""

    def __init__(self, checkpoint: Checkpoint, device: Optional[str] = None, batch_size: int = 256):
        self.checkpoint = checkpoint
        self.model = checkpoint.build_model(device)
        self.batch_size = batch_size

    @classmethod
    def from_path(cls, path: Union[str, Path], schema: Optional[IapSchema] = None, **kwargs) -> "IapPredictor":
        return cls(load_checkpoint(path, schema), **kwargs)

    @property
    def schema(self) -> IapSchema:
        return self.checkpoint.schema

    @property
    def image_size(self) -> int:
        return self.checkpoint.config.image_size

    def predict_images(self, images: np.ndarray) -> np.ndarray:
        """Raw outputs [N, width] for preprocessed images [N, H, W]."""
        return self.model.predict(images, batch_size=self.batch_size)

    def predict_records(self, records: Sequence[SliceRecord]) -> np.ndarray:
        return self.predict_images(preprocess_records(records, self.image_size))

    def decode_records(self, records: Sequence[SliceRecord]) -> list[DecodedPrediction]:
        return decode_batch(self.predict_records(records), self.schema)
