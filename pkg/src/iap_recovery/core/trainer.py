"""Training loop with per-epoch validation and best-validation checkpointing."""
import logging
import math
from collections.abc import Sequence
from pathlib import Path
from typing import Optional, Union

import pandas as pd
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from ..data.ingestion import SliceDataset, SliceRecord
from ..exceptions import NonFiniteLossError, TrainingError
from ..utils import ensure_output_dir, seed_everything
from .checkpoint import CHECKPOINT_NAME, Checkpoint, save_checkpoint
from .losses import compute_loss
from .model import PredictorModel, TrainConfig, resolve_device
from .schema import IapSchema

logger = logging.getLogger(__name__)

CURVE_NAME = "training_curve.csv"


def _run_epoch(
    model: PredictorModel,
    loader: DataLoader,
    config: TrainConfig,
    device: torch.device,
    epoch: int,
    optimizer: Optional[torch.optim.Optimizer] = None,
    scheduler: Optional[torch.optim.lr_scheduler.LRScheduler] = None,
) -> dict[str, float]:
    """One pass over a loader. Trains when an optimizer is given; returns sample-weighted mean losses."""
    training = optimizer is not None
    model.train(training)
    sums: dict[str, float] = {}
    seen = 0

    with torch.set_grad_enabled(training):
        for images, categorical, continuous in loader:
            images = images.to(device)
            outputs = model(images)
            breakdown = compute_loss(
                outputs, categorical.to(device), continuous.to(device), model.schema, config.lam, config.eta
            )

            for head, term in breakdown.terms.items():
                value = float(term.detach())
                if not math.isfinite(value):
                    raise NonFiniteLossError(head, epoch, value)

            if training:
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                if scheduler is not None:
                    scheduler.step()

            n = images.shape[0]
            seen += n
            for key, value in breakdown.as_floats().items():
                sums[key] = sums.get(key, 0.0) + value * n

    return {key: value / seen for key, value in sums.items()}


def write_curve(curve: Sequence[dict[str, float]], path: Union[str, Path]) -> Path:
    """Per-epoch losses as CSV."""
    path = Path(path)
    pd.DataFrame(list(curve)).to_csv(path, index=False, float_format="%.10g")
    return path


def train(
    config: TrainConfig,
    schema: IapSchema,
    train_records: Sequence[SliceRecord],
    val_records: Sequence[SliceRecord],
    out_dir: Optional[Union[str, Path]] = None,
) -> Checkpoint:
    """Train a predictor and return its best-validation checkpoint.

    Validation loss (the weighted total) is computed after every epoch. The
    checkpoint, when out_dir is given, is overwritten each time that loss
    strictly improves; the training curve is written next to it at the end.

    Args:
        config: Training recipe
        schema: Output layout; records are encoded against it up front
        train_records: Slices to fit on
        val_records: Held-out slices for model selection
        out_dir: Optional directory for checkpoint.pt and training_curve.csv

    Returns:
        Checkpoint of the epoch with the lowest validation loss

    Raises:
        TrainingError: Empty splits
        NonFiniteLossError: A head's loss became NaN or infinite
        EncodingError: A record has values the schema cannot encode
    """
    if not train_records or not val_records:
        raise TrainingError(f"Training needs non-empty splits (train={len(train_records)}, val={len(val_records)})")

    seed_everything(config.seed)
    device = resolve_device(config.device)
    out_path = ensure_output_dir(Path(out_dir)) if out_dir is not None else None

    cache = config.num_workers == 0
    train_set = SliceDataset(train_records, schema, config.image_size, cache=cache)
    val_set = SliceDataset(val_records, schema, config.image_size, cache=cache)
    generator = torch.Generator().manual_seed(config.seed)
    train_loader = DataLoader(
        train_set, batch_size=config.batch_size, shuffle=True, num_workers=config.num_workers, generator=generator
    )
    val_loader = DataLoader(val_set, batch_size=config.batch_size, shuffle=False, num_workers=config.num_workers)

    model = PredictorModel.from_config(schema, config)
    if schema.M:
        model.init_regression_bias(train_set.continuous.mean(dim=0))
    model = model.to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    scheduler = None
    if config.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs * len(train_loader))

    logger.info(
        f"Training {config.backbone} backbone on {len(train_set)} slices ({len(val_set)} val), "
        f"{config.epochs} epochs, batch {config.batch_size}, {config.lr_schedule} lr, device {device}"
    )

    best: Optional[Checkpoint] = None
    curve: list[dict[str, float]] = []
    for epoch in tqdm(range(config.epochs), desc="epochs", disable=None):
        train_losses = _run_epoch(model, train_loader, config, device, epoch, optimizer, scheduler)
        val_losses = _run_epoch(model, val_loader, config, device, epoch)

        if best is None or val_losses["total"] < best.best_val_loss:
            state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
            best = Checkpoint(
                state_dict=state, schema=schema, config=config, best_val_loss=val_losses["total"], epoch=epoch
            )
            if out_path is not None:
                save_checkpoint(best, out_path / CHECKPOINT_NAME)

        row = {"epoch": epoch, "train_loss": train_losses["total"], "val_loss": val_losses["total"]}
        row.update({f"train_{name}": train_losses[name] for name in schema.names})
        row.update({f"val_{name}": val_losses[name] for name in schema.names})
        row["best_val_loss"] = best.best_val_loss
        curve.append(row)
        logger.debug(f"Epoch {epoch}: train {train_losses['total']:.6f}, val {val_losses['total']:.6f}")

    best = Checkpoint(
        state_dict=best.state_dict,
        schema=schema,
        config=config,
        best_val_loss=best.best_val_loss,
        epoch=best.epoch,
        curve=tuple(curve),
    )
    if out_path is not None:
        save_checkpoint(best, out_path / CHECKPOINT_NAME)
        write_curve(curve, out_path / CURVE_NAME)

    logger.info(f"✓ Best validation loss {best.best_val_loss:.6f} at epoch {best.epoch}")
    return best
