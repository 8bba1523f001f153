"""Slice manifests: loading, incomplete-patient exclusion, patient-level splits, preprocessing.

MANIFEST FORMAT (comma-delimited, one row per 2D slice):
    patient_id, slice_index, image_path, <one column per IAP>, downstream_label

Relative image paths resolve against the manifest's directory. IAP cells stay
unparsed strings here; they are checked against a schema at encode time.
"""
import csv
import json
import logging
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from ..core.schema import IapSchema, encode_labels
from ..exceptions import ImageLoadError, ManifestError, SplitError

logger = logging.getLogger(__name__)

FIXED_COLUMNS = ("patient_id", "slice_index", "image_path")
LABEL_COLUMN = "downstream_label"
SUBSETS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)
DEFAULT_IMAGE_SIZE = 224

_PIL_SUFFIXES = {".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class SliceRecord:
    """One 2D slice and its ground-truth IAP values."""

    patient_id: str
    slice_index: int
    image_ref: Path
    iap_values: Mapping[str, str]
    downstream_label: Optional[int] = None

    def missing_iaps(self, names: Iterable[str]) -> list[str]:
        """Names with no value on this slice."""
        return [n for n in names if not str(self.iap_values.get(n, "")).strip()]


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/val/test record lists."""

    train: tuple[SliceRecord, ...]
    val: tuple[SliceRecord, ...]
    test: tuple[SliceRecord, ...]
    seed: int
    fractions: tuple[float, float, float]

    def subset(self, name: str) -> tuple[SliceRecord, ...]:
        if name not in SUBSETS:
            raise SplitError(f"Unknown subset '{name}'. Must be one of {SUBSETS}")
        return getattr(self, name)

    def patient_ids(self, name: str) -> tuple[str, ...]:
        return tuple(sorted({r.patient_id for r in self.subset(name)}))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "fractions": list(self.fractions),
            **{name: list(self.patient_ids(name)) for name in SUBSETS},
            "slice_counts": {name: len(self.subset(name)) for name in SUBSETS},
        }


def _parse_label(text: str, row_number: int) -> Optional[int]:
    if not text:
        return None
    if text not in {"0", "1"}:
        raise ManifestError(f"Row {row_number}: downstream_label must be 0, 1 or empty, got '{text}'")
    return int(text)


def load_manifest(
    path: Union[str, Path],
    schema: Optional[IapSchema] = None,
    require_images: bool = True,
) -> list[SliceRecord]:
    """Load a slice manifest.

    Args:
        path: Manifest file
        schema: Optional schema whose IAP names must all appear as columns
        require_images: Check that every image path resolves to a file

    Returns:
        One SliceRecord per data row, in file order

    Raises:
        ManifestError: Missing file, bad header, malformed row (with row number)
            or duplicate (patient_id, slice_index)
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"Manifest not found: {path}")

    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"Manifest has no header row: {path}")

        header = [h.strip() for h in header]
        if len(header) < 4 or tuple(header[:3]) != FIXED_COLUMNS or header[-1] != LABEL_COLUMN:
            raise ManifestError(
                f"Manifest header must be {', '.join(FIXED_COLUMNS)}, <IAP columns...>, {LABEL_COLUMN}; got {header}"
            )
        iap_columns = header[3:-1]
        if len(set(iap_columns)) != len(iap_columns):
            raise ManifestError(f"Manifest header repeats an IAP column: {iap_columns}")

        if schema is not None:
            absent = [n for n in schema.names if n not in iap_columns]
            if absent:
                raise ManifestError(f"Manifest lacks columns for IAPs {absent}")

        records = []
        seen: set[tuple[str, int]] = set()
        for row_number, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ManifestError(f"Row {row_number}: expected {len(header)} fields, got {len(row)}")

            cells = [cell.strip() for cell in row]
            patient_id, slice_text, image_text = cells[:3]
            if not patient_id:
                raise ManifestError(f"Row {row_number}: empty patient_id")
            try:
                slice_index = int(slice_text)
            except ValueError:
                raise ManifestError(f"Row {row_number}: slice_index '{slice_text}' is not an integer") from None
            if not image_text:
                raise ManifestError(f"Row {row_number}: missing image path")

            image_ref = Path(image_text)
            if not image_ref.is_absolute():
                image_ref = path.parent / image_ref
            if require_images and not image_ref.is_file():
                raise ManifestError(f"Row {row_number}: image not found: {image_ref}")

            key = (patient_id, slice_index)
            if key in seen:
                raise ManifestError(f"Row {row_number}: duplicate slice {slice_index} for patient {patient_id}")
            seen.add(key)

            records.append(
                SliceRecord(
                    patient_id=patient_id,
                    slice_index=slice_index,
                    image_ref=image_ref,
                    iap_values=dict(zip(iap_columns, cells[3:-1])),
                    downstream_label=_parse_label(cells[-1], row_number),
                )
            )

    logger.info(f"Loaded {len(records)} slices from {path}")
    return records


def write_manifest(records: Sequence[SliceRecord], path: Union[str, Path], iap_names: Sequence[str]) -> Path:
    """Write records in manifest format; image paths are stored relative to the manifest when possible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([*FIXED_COLUMNS, *iap_names, LABEL_COLUMN])
        for record in records:
            try:
                image_text = Path(record.image_ref).relative_to(path.parent).as_posix()
            except ValueError:
                image_text = str(record.image_ref)
            label = "" if record.downstream_label is None else str(record.downstream_label)
            writer.writerow(
                [
                    record.patient_id,
                    record.slice_index,
                    image_text,
                    *(record.iap_values.get(n, "") for n in iap_names),
                    label,
                ]
            )
    return path


def exclude_incomplete(records: Sequence[SliceRecord], schema: IapSchema) -> tuple[list[SliceRecord], list[str]]:
    """Drop every slice of any patient with at least one missing IAP value.

    Returns:
        (kept records in input order, excluded patient ids in first-seen order)
    """
    excluded: dict[str, None] = {}
    for record in records:
        if record.missing_iaps(schema.names):
            excluded.setdefault(record.patient_id, None)

    kept = [r for r in records if r.patient_id not in excluded]
    if excluded:
        logger.warning(f"Excluded {len(excluded)} patient(s) with missing IAP values ({len(records) - len(kept)} slices)")
    return kept, list(excluded)


def split_by_patient(
    records: Sequence[SliceRecord],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> SplitAssignment:
    """Split records into train/val/test so that no patient spans two subsets.

    Patients (sorted by id) are shuffled by a seeded generator and filled into
    the subsets in order; a subset closes once the running slice count first
    reaches its cumulative target, so each subset lands within one patient's
    slice count of its target fraction.

    Raises:
        SplitError: On invalid fractions or fewer patients than non-empty subsets
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(SUBSETS):
        raise SplitError(f"Need {len(SUBSETS)} fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"Fractions must be non-negative and sum to 1, got {fractions}")

    slices_per_patient = Counter(r.patient_id for r in records)
    patients = sorted(slices_per_patient)
    wanted = sum(1 for f in fractions if f > 0)
    if len(patients) < wanted:
        raise SplitError(f"{len(patients)} patient(s) cannot fill {wanted} subsets")

    rng = np.random.default_rng(seed)
    shuffled = [patients[i] for i in rng.permutation(len(patients))]

    total = sum(slices_per_patient.values())
    boundaries = np.cumsum(fractions) * total
    tolerance = 1e-9 * max(total, 1)

    assignment: dict[str, int] = {}
    running = 0
    subset = 0
    for patient_id in shuffled:
        while subset < len(SUBSETS) - 1 and running >= boundaries[subset] - tolerance:
            subset += 1
        assignment[patient_id] = subset
        running += slices_per_patient[patient_id]

    buckets: list[list[SliceRecord]] = [[] for _ in SUBSETS]
    for record in records:
        buckets[assignment[record.patient_id]].append(record)

    split = SplitAssignment(
        train=tuple(buckets[0]), val=tuple(buckets[1]), test=tuple(buckets[2]), seed=seed, fractions=fractions
    )
    logger.info(f"✓ Split {len(patients)} patients: " + ", ".join(f"{n}={len(split.subset(n))}" for n in SUBSETS))
    return split


def save_split(split: SplitAssignment, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(split.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_split(path: Union[str, Path], records: Sequence[SliceRecord]) -> SplitAssignment:
    """Rebuild a split from a saved split file. Patients absent from the file are dropped."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise SplitError(f"Cannot read split file {path}: {e}") from e

    owner: dict[str, str] = {}
    for name in SUBSETS:
        for patient_id in data.get(name, []):
            if patient_id in owner:
                raise SplitError(f"Patient {patient_id} appears in both {owner[patient_id]} and {name}")
            owner[patient_id] = name

    buckets: dict[str, list[SliceRecord]] = {name: [] for name in SUBSETS}
    for record in records:
        if record.patient_id in owner:
            buckets[owner[record.patient_id]].append(record)

    return SplitAssignment(
        train=tuple(buckets["train"]),
        val=tuple(buckets["val"]),
        test=tuple(buckets["test"]),
        seed=int(data.get("seed", 0)),
        fractions=tuple(data.get("fractions", DEFAULT_FRACTIONS)),
    )


def load_image(image_ref: Union[str, Path]) -> np.ndarray:
    """Load a single-channel image as float64. Dispatches on extension (.png/.tif via Pillow, .npy raster)."""
    path = Path(image_ref)
    suffix = path.suffix.lower()
    try:
        if suffix == ".npy":
            array = np.load(path, allow_pickle=False)
        elif suffix in _PIL_SUFFIXES:
            with Image.open(path) as img:
                array = np.asarray(img)
        else:
            raise ImageLoadError(f"Unsupported image type '{suffix}': {path}")
    except (OSError, ValueError) as e:
        raise ImageLoadError(f"Cannot read image {path}: {e}") from e

    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 3 and array.shape[-1] == 1:
        array = array[..., 0]
    if array.ndim != 2:
        raise ImageLoadError(f"Expected a single-channel 2D image, got shape {array.shape}: {path}")
    if array.size == 0:
        raise ImageLoadError(f"Zero-sized image: {path}")
    return array


def preprocess_array(image: np.ndarray, size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize to size x size, then per-image min-max rescale to [0, 255].

    Constant images map to all zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ImageLoadError(f"Expected a non-empty 2D image, got shape {image.shape}")
    if not np.isfinite(image).all():
        raise ImageLoadError("Image contains non-finite values")

    if image.shape != (size, size):
        resized = Image.fromarray(image.astype(np.float32)).resize((size, size), resample=Image.Resampling.BILINEAR)
        image = np.asarray(resized, dtype=np.float64)

    low, high = image.min(), image.max()
    if high <= low:
        return np.zeros((size, size), dtype=np.float64)
    return (image - low) / (high - low) * 255.0


def preprocess_image(image_ref: Union[str, Path], size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Load and preprocess one slice image. Pure; safe to call from data-loading workers."""
    return preprocess_array(load_image(image_ref), size=size)


def preprocess_records(records: Sequence[SliceRecord], size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Preprocessed images stacked to [N, size, size] float32."""
    if not records:
        return np.zeros((0, size, size), dtype=np.float32)
    return np.stack([preprocess_image(r.image_ref, size) for r in records]).astype(np.float32)


class SliceDataset(Dataset):
    """Torch dataset yielding (image [1, H, W], categorical targets [K], continuous targets [M]).

    Labels are encoded up front so schema problems surface before training starts.
    With cache on, preprocessed images are kept after first load. Each loader
    worker holds its own copy of the dataset, so callers turn the cache off
    when num_workers > 0.
    """

    def __init__(
        self,
        records: Sequence[SliceRecord],
        schema: IapSchema,
        image_size: int = DEFAULT_IMAGE_SIZE,
        cache: bool = True,
    ):
        self.records = list(records)
        self.schema = schema
        self.image_size = image_size
        labels = [encode_labels(r.iap_values, schema) for r in self.records]
        self.categorical = torch.tensor([lv.categorical_targets for lv in labels], dtype=torch.long).reshape(
            len(labels), schema.K
        )
        self.continuous = torch.tensor([lv.continuous_targets for lv in labels], dtype=torch.float32).reshape(
            len(labels), schema.M
        )
        self.cache = cache
        self._cache: dict[int, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int):
        image = self._cache.get(index)
        if image is None:
            array = preprocess_image(self.records[index].image_ref, self.image_size)
            image = torch.from_numpy(array.astype(np.float32)).unsqueeze(0)
            if self.cache:
                self._cache[index] = image
        return image, self.categorical[index], self.continuous[index]
