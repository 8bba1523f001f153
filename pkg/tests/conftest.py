"""Shared fixtures."""
from pathlib import Path

import numpy as np
import pytest

from iap_recovery.core.schema import DESK_SCHEMA, FULL_SCHEMA, IapDescriptor, IapKind, build_schema, load_bundled_schema
from iap_recovery.data.ingestion import SliceRecord


@pytest.fixture
def desk_schema():
    return load_bundled_schema(DESK_SCHEMA)


@pytest.fixture
def full_schema():
    return load_bundled_schema(FULL_SCHEMA)


@pytest.fixture
def small_schema():
    """Width 7: manufacturer (2) + flip_angle (4) + te (1)."""
    return build_schema(
        [
            IapDescriptor("manufacturer", IapKind.CATEGORICAL, ("GE", "Siemens")),
            IapDescriptor("flip_angle", IapKind.CATEGORICAL, ("8", "10", "12", "15"), unit="deg"),
            IapDescriptor("te", IapKind.CONTINUOUS, unit="ms"),
        ],
        name="small",
    )


@pytest.fixture
def make_record():
    """Factory for in-memory slice records (image paths need not exist)."""

    def factory(patient_id="P0", slice_index=0, label=None, image_ref="img.npy", **values):
        return SliceRecord(
            patient_id=patient_id,
            slice_index=slice_index,
            image_ref=Path(image_ref),
            iap_values={k: str(v) for k, v in values.items()},
            downstream_label=label,
        )

    return factory


@pytest.fixture
def write_image():
    """Write a random .npy slice and return its path."""

    def writer(path, size=32, seed=0):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, np.random.default_rng(seed).random((size, size)))
        return path

    return writer
