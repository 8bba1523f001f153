"""Multi-head IAP predictor: residual backbone plus one fully-connected output layer."""
import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Optional, Union

import numpy as np
import torch
import torch.nn as nn
from torchvision import models
from torchvision.models.resnet import BasicBlock, conv1x1, conv3x3

from ..exceptions import ModelError
from ..utils import get_device
from .schema import IapSchema, PredictionVector

logger = logging.getLogger(__name__)

BACKBONES = ("full", "tiny")
PRESET_ALIASES = {"paper": "full"}
PRESETS = ("full", "tiny", *PRESET_ALIASES)
SCHEDULES = ("constant", "cosine")
TINY_WIDTHS = (16, 32, 64, 128)


@dataclass(frozen=True)
class TrainConfig:
    """Training recipe. Defaults reproduce the full-scale recipe."""

    batch_size: int = 512
    epochs: int = 100
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    lam: float = 1.0
    eta: float = 1.0
    backbone: str = "full"
    image_size: int = 224
    num_workers: int = 0
    pretrained: bool = False
    lr_schedule: str = "constant"
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ModelError(f"Unknown backbone '{self.backbone}'. Must be one of {BACKBONES}")
        if self.lr_schedule not in SCHEDULES:
            raise ModelError(f"Unknown learning-rate schedule '{self.lr_schedule}'. Must be one of {SCHEDULES}")
        for name in ("batch_size", "epochs", "image_size"):
            if int(getattr(self, name)) < 1:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ModelError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ModelError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.lam < 0 or self.eta < 0:
            raise ModelError(f"Loss weights must be non-negative, got lambda={self.lam}, eta={self.eta}")
        if self.num_workers < 0:
            raise ModelError(f"num_workers must be non-negative, got {self.num_workers}")

    @classmethod
    def preset(cls, name: str = "full", **overrides: Any) -> "TrainConfig":
        """Named recipe.

        "tiny" trades the full backbone for a CPU-sized one on 64x64 inputs,
        with smaller batches and a cosine-annealed learning rate so 30 epochs
        settle the regression heads.
        """
        if name not in PRESETS:
            raise ModelError(f"Unknown preset '{name}'. Must be one of {PRESETS}")
        name = PRESET_ALIASES.get(name, name)
        base = {"device": get_device()}
        if name == "tiny":
            base.update(backbone="tiny", image_size=64, batch_size=32, epochs=30, lr_schedule="cosine")
        return cls(**{**base, **overrides})

    def replace(self, **overrides: Any) -> "TrainConfig":
        """Copy with overrides; None values are ignored so unset CLI flags fall through."""
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ModelError(f"Unknown config field(s): {sorted(unknown)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


class TinyResNet(nn.Module):
    """Reduced-width residual network for small inputs: 3x3 stem, no max-pool, one block per stage by default."""

    def __init__(self, widths: tuple[int, ...] = TINY_WIDTHS, blocks_per_stage: int = 1):
        super().__init__()
        self.stem = nn.Sequential(conv3x3(3, widths[0]), nn.BatchNorm2d(widths[0]), nn.ReLU(inplace=True))

        stages = []
        inplanes = widths[0]
        for i, planes in enumerate(widths):
            stride = 1 if i == 0 else 2
            downsample = None
            if stride != 1 or inplanes != planes:
                downsample = nn.Sequential(conv1x1(inplanes, planes, stride), nn.BatchNorm2d(planes))
            blocks = [BasicBlock(inplanes, planes, stride=stride, downsample=downsample)]
            blocks += [BasicBlock(planes, planes) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            inplanes = planes

        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_features = widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.stages(self.stem(x))), 1)


def build_backbone(name: str = "full", pretrained: bool = False) -> tuple[nn.Module, int]:
    """Feature extractor and its output width."""
    if name == "full":
        weights = models.ResNet18_Weights.DEFAULT if pretrained else None
        resnet = models.resnet18(weights=weights)
        features = resnet.fc.in_features
        resnet.fc = nn.Identity()
        return resnet, features
    if name == "tiny":
        if pretrained:
            raise ModelError("No pretrained weights exist for the tiny backbone")
        tiny = TinyResNet()
        return tiny, tiny.out_features
    raise ModelError(f"Unknown backbone '{name}'. Must be one of {BACKBONES}")


class PredictorModel(nn.Module):
    """Shared backbone with a single linear layer laid out per the IAP schema.

    Inputs are preprocessed slices in [0, 255], shaped [N, 1, H, W] or [N, H, W].
    One forward pass yields every head.
    """

    def __init__(self, schema: IapSchema, backbone: str = "full", image_size: int = 224, pretrained: bool = False):
        super().__init__()
        self.schema = schema
        self.image_size = image_size
        self.backbone_name = backbone
        self.backbone, features = build_backbone(backbone, pretrained)
        self.head = nn.Linear(features, schema.output_width)

    @classmethod
    def from_config(cls, schema: IapSchema, config: TrainConfig) -> "PredictorModel":
        return cls(schema, backbone=config.backbone, image_size=config.image_size, pretrained=config.pretrained)

    @torch.no_grad()
    def init_regression_bias(self, means: Union[np.ndarray, torch.Tensor]) -> None:
        """Start each regression unit at its training-target mean [M] instead of 0 ms."""
        means = torch.as_tensor(means, dtype=self.head.bias.dtype).reshape(-1)
        if means.numel() != self.schema.M:
            raise ModelError(f"Expected {self.schema.M} target means, got {means.numel()}")
        for m, descriptor in enumerate(self.schema.continuous):
            self.head.bias[self.schema.head_slice(descriptor.name).start] = means[m]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if images.dim() != 4 or images.shape[1] != 1:
            raise ModelError(f"Expected grayscale batch [N, 1, H, W], got {tuple(images.shape)}")
        if images.shape[0] == 0:
            raise ModelError("Empty image batch")
        if tuple(images.shape[-2:]) != (self.image_size, self.image_size):
            raise ModelError(
                f"Expected {self.image_size}x{self.image_size} inputs, got {images.shape[-2]}x{images.shape[-1]}"
            )

        x = (images.float() / 255.0).expand(-1, 3, -1, -1)
        return self.head(self.backbone(x))

    @torch.no_grad()
    def predict(self, images: Union[np.ndarray, torch.Tensor], batch_size: int = 256) -> np.ndarray:
        """Raw outputs [N, width] in eval mode."""
        self.eval()
        images = torch.as_tensor(np.asarray(images, dtype=np.float32)) if isinstance(images, np.ndarray) else images
        if len(images) == 0:
            raise ModelError("Empty image batch")

        device = next(self.parameters()).device
        outputs = [self(images[i : i + batch_size].to(device)).cpu() for i in range(0, len(images), batch_size)]
        return torch.cat(outputs).double().numpy()

    def predict_batch(self, images: Union[np.ndarray, torch.Tensor], batch_size: int = 256) -> list[PredictionVector]:
        return [PredictionVector(raw=row, schema=self.schema) for row in self.predict(images, batch_size)]


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def resolve_device(device: Optional[str] = None) -> torch.device:
    """torch.device for an explicit string or the IAP_DEVICE environment setting."""
    try:
        return torch.device(device or get_device())
    except RuntimeError as e:
        raise ModelError(f"Invalid device '{device}': {e}") from e
