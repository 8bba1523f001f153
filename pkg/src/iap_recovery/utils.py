"""Shared utilities - no business logic."""
import hashlib
import json
import logging
import os
import random
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .exceptions import OutputError

logger = logging.getLogger(__name__)

DEVICE_ENV_VAR = "IAP_DEVICE"
DEFAULT_DEVICE = "cpu"


def get_device() -> str:
    """Get the torch device string from IAP_DEVICE (default: cpu)."""
    return os.getenv(DEVICE_ENV_VAR) or DEFAULT_DEVICE


def derive_seed(seed: int, *keys: int) -> int:
    """Derive a deterministic sub-seed from a root seed and integer keys."""
    sequence = np.random.SeedSequence([seed, *keys])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch generators and request deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def sha256_file(path: Path) -> str:
    """SHA-256 hex digest of a file."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_json(data: Any) -> str:
    """SHA-256 hex digest of the canonical JSON form of data."""
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_json(path: Path, data: Any) -> Path:
    """Write data as indented JSON with sorted keys."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def ensure_output_dir(path: Path) -> Path:
    """Create an output directory or raise OutputError if it cannot be written."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"Cannot create output directory {path}: {e}") from e

    if not path.is_dir() or not os.access(path, os.W_OK):
        raise OutputError(f"Output directory is not writable: {path}")
    return path
