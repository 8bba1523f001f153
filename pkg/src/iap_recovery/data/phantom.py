"""Synthetic breast-slice phantoms whose appearance is driven by IAP values.

Anatomy (body outline, fibroglandular ellipses, chest-wall muscle band,
band-limited texture, optional lesion) depends only on (anatomy seed, slice
index). Every IAP drives exactly one rendering channel; categorical IAPs pick
a setting from that channel's ladder by class index, TE and TR feed a
two-parameter tissue signal curve.

Besides the patient, every slice shows fixed calibration hardware:

    * a frame at full intensity and four black corner notches, so per-image
      min-max normalization maps the rendered [0, 1] range onto [0, 255]
      unchanged;
    * two reference rods above the body. The solid rod holds a material that
      only responds to TE, the striped rod one that only responds to TR.
      Each rod's signal is windowed onto ROD_WINDOW over the sampling range.

Tissue constants are chosen so TE changes gland/fat contrast and TR changes
muscle/fat contrast inside the body as well.
"""
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from tqdm import tqdm

from ..core.schema import IapKind, IapSchema
from ..exceptions import EncodingError, PhantomError
from ..utils import ensure_output_dir, write_json
from .ingestion import SliceRecord, write_manifest

logger = logging.getLogger(__name__)

REFERENCE_SIZE = 64
DEFAULT_IMAGE_SIZE = 64
TE_RANGE_MS = (1.25, 2.76)
TR_RANGE_MS = (3.54, 7.40)
LABEL_RULES = ("none", "lesion", "inverted")

# Minimum mean absolute pixel difference between renders that differ in one categorical value
IDENTIFIABILITY_FLOOR = 0.004

# (T1 ms, T2 ms) per tissue
FAT = (1.0, 8.0)
GLAND = (1.0, 1.5)
MUSCLE = (10.0, 8.0)
TE_ROD = (1e-3, 4.0)
TR_ROD = (20.0, math.inf)

DISPLAY_SCALE = 0.32
LESION_ENHANCEMENT = 0.4
GRID_LINE_GAIN = 0.5
TEXTURE_AMPLITUDE = 0.25
FRAME_LEVEL = 1.0

# Rod geometry in unit image coordinates; the body never reaches above y = 0.16
ROD_WINDOW = (0.58, 0.94)
ROD_ROWS = (0.05, 0.15)
TE_ROD_COLUMNS = (0.05, 0.46)
TR_ROD_COLUMNS = (0.54, 0.95)

MANIFEST_NAME = "manifest.csv"
PROVENANCE_NAME = "provenance.json"


@dataclass(frozen=True)
class ChannelLadder:
    """Rendering channel. Category index i maps to base + step * i; step is the minimum spacing."""

    name: str
    base: float = 0.0
    step: float = 1.0
    continuous: bool = False
    max_categories: Optional[int] = None

    def setting(self, index: int) -> float:
        return self.base + self.step * index


CHANNELS: dict[str, ChannelLadder] = {
    c.name: c
    for c in (
        ChannelLadder("noise_sigma", base=0.006, step=0.012),
        ChannelLadder("blur_sigma", base=0.0, step=0.6),
        ChannelLadder("gamma", base=0.7, step=0.25),
        ChannelLadder("grid_period", base=4.0, step=2.0),
        ChannelLadder("border_width", base=1.0, step=1.0),
        ChannelLadder("plateau", base=0.0, step=0.04),
        ChannelLadder("flip", base=0.0, step=1.0, max_categories=4),
        ChannelLadder("texture_frequency", base=4.0, step=3.0),
        ChannelLadder("ringing", base=0.0, step=0.06),
        ChannelLadder("bias_field", base=0.0, step=0.15),
        ChannelLadder("te_response", continuous=True),
        ChannelLadder("tr_response", continuous=True),
    )
}

DEFAULT_EFFECTS = {
    "manufacturer": "border_width",
    "scanner_model": "grid_period",
    "scan_options": "ringing",
    "field_strength": "noise_sigma",
    "patient_position": "flip",
    "contrast_agent": "texture_frequency",
    "acquisition_matrix": "gamma",
    "slice_thickness": "blur_sigma",
    "flip_angle": "plateau",
    "fov_computed": "bias_field",
    "tr": "tr_response",
    "te": "te_response",
}


@dataclass(frozen=True)
class PhantomSpec:
    """Which rendering channel each IAP drives, plus image size and base anatomy seed."""

    schema: IapSchema
    effects: Mapping[str, str]
    image_size: int = DEFAULT_IMAGE_SIZE
    base_seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise PhantomError(f"Image size must be at least 16, got {self.image_size}")

        names = set(self.schema.names)
        if set(self.effects) != names:
            raise PhantomError(f"Effect map must cover exactly the schema IAPs {sorted(names)}")
        channels = list(self.effects.values())
        if len(set(channels)) != len(channels):
            raise PhantomError("Two IAPs cannot drive the same rendering channel")

        scale = self.image_size / REFERENCE_SIZE
        for descriptor in self.schema.descriptors:
            channel = CHANNELS.get(self.effects[descriptor.name])
            if channel is None:
                raise PhantomError(f"Unknown rendering channel '{self.effects[descriptor.name]}'")
            if channel.continuous != (descriptor.kind is IapKind.CONTINUOUS):
                raise PhantomError(f"Channel '{channel.name}' does not fit {descriptor.kind.value} IAP '{descriptor.name}'")
            if descriptor.kind is IapKind.CATEGORICAL:
                count = len(descriptor.categories)
                if channel.max_categories is not None and count > channel.max_categories:
                    raise PhantomError(f"Channel '{channel.name}' supports at most {channel.max_categories} categories")
                if channel.name == "border_width" and channel.setting(count - 1) * scale >= ROD_ROWS[0] * (
                    self.image_size - 1
                ):
                    raise PhantomError(f"IAP '{descriptor.name}' has too many categories for a border ladder")

    @classmethod
    def for_schema(
        cls,
        schema: IapSchema,
        image_size: int = DEFAULT_IMAGE_SIZE,
        base_seed: int = 0,
        effects: Optional[Mapping[str, str]] = None,
    ) -> "PhantomSpec":
        """Default effect map; IAPs without a default take the first free channel of their kind."""
        assigned = dict(effects or {})
        for descriptor in schema.descriptors:
            default = DEFAULT_EFFECTS.get(descriptor.name)
            if descriptor.name not in assigned and default and default not in assigned.values():
                assigned[descriptor.name] = default

        for descriptor in schema.descriptors:
            if descriptor.name in assigned:
                continue
            wants_continuous = descriptor.kind is IapKind.CONTINUOUS
            free = [
                c.name for c in CHANNELS.values() if c.continuous == wants_continuous and c.name not in assigned.values()
            ]
            if not free:
                raise PhantomError(f"No free rendering channel for IAP '{descriptor.name}'")
            assigned[descriptor.name] = free[0]

        ordered = {d.name: assigned[d.name] for d in schema.descriptors}
        return cls(schema=schema, effects=ordered, image_size=image_size, base_seed=base_seed)

    def channel_settings(self, values: Mapping[str, Any]) -> dict[str, float]:
        """Channel parameters for a set of IAP values (rendering introspection).

        Raises:
            PhantomError: If a value is missing or invalid for its IAP
        """
        settings = {}
        for descriptor in self.schema.descriptors:
            channel = CHANNELS[self.effects[descriptor.name]]
            try:
                value = descriptor.parse(values.get(descriptor.name))
                if descriptor.kind is IapKind.CATEGORICAL:
                    settings[channel.name] = channel.setting(descriptor.category_index(value))
                else:
                    settings[channel.name] = float(value)
            except EncodingError as e:
                raise PhantomError(f"Invalid IAP values for phantom: {e}") from e
        return settings

    def to_dict(self) -> dict[str, Any]:
        return {"effects": dict(self.effects), "image_size": self.image_size, "base_seed": self.base_seed}


@dataclass(frozen=True, eq=False)
class Anatomy:
    """Seed-determined tissue layout. Fractions are per pixel in [0, 1]."""

    body: np.ndarray
    density: np.ndarray
    gland: np.ndarray
    muscle: np.ndarray
    lesion: np.ndarray
    radius: np.ndarray
    has_lesion: bool


def _ellipse(xx, yy, cx, cy, rx, ry, angle=0.0) -> np.ndarray:
    cos, sin = math.cos(angle), math.sin(angle)
    u = (xx - cx) * cos + (yy - cy) * sin
    v = -(xx - cx) * sin + (yy - cy) * cos
    return np.sqrt((u / rx) ** 2 + (v / ry) ** 2)


def build_anatomy(anatomy_seed: int, slice_index: int, size: int = DEFAULT_IMAGE_SIZE) -> Anatomy:
    """Layered ellipses plus band-limited texture for one slice."""
    if anatomy_seed < 0 or slice_index < 0:
        raise PhantomError("Anatomy seed and slice index must be non-negative")
    rng = np.random.default_rng([anatomy_seed, slice_index])
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    scale = size / REFERENCE_SIZE

    cx, cy = 0.5 + rng.uniform(-0.03, 0.03), 0.55 + rng.uniform(-0.03, 0.03)
    rx, ry = 0.42 + rng.uniform(-0.03, 0.03), 0.33 + rng.uniform(-0.03, 0.03)
    radius = _ellipse(xx, yy, cx, cy, rx, ry)
    body = radius <= 1.0

    gland = np.zeros((size, size))
    for _ in range(int(rng.integers(2, 5))):
        gx = cx + rng.uniform(-0.5, 0.5) * rx
        gy = cy + rng.uniform(-0.1, 0.6) * ry
        shape = _ellipse(xx, yy, gx, gy, rng.uniform(0.06, 0.16), rng.uniform(0.05, 0.12), rng.uniform(0, math.pi))
        gland = np.maximum(gland, (shape <= 1.0).astype(float))
    gland = gaussian_filter(gland, sigma=1.0 * scale) * body

    muscle_top = cy - ry
    muscle = ((yy >= muscle_top) & (yy <= muscle_top + 0.16 + rng.uniform(-0.02, 0.02))).astype(float) * body
    gland = np.minimum(gland, 1.0 - muscle)

    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 32)
    texture = texture / (texture.std() + 1e-12) * 0.12
    density = np.clip(0.75 + texture, 0.3, 1.0) * body

    has_lesion = bool(rng.random() < 0.5)
    lesion = np.zeros((size, size))
    lx = cx + rng.uniform(-0.45, 0.45) * rx
    ly = cy + rng.uniform(0.0, 0.55) * ry
    lr = rng.uniform(0.05, 0.07)
    if has_lesion:
        lesion = gaussian_filter((_ellipse(xx, yy, lx, ly, lr, lr) <= 1.0).astype(float), sigma=0.5 * scale) * body

    return Anatomy(
        body=body, density=density, gland=gland, muscle=muscle, lesion=lesion, radius=radius, has_lesion=has_lesion
    )


def _tissue_signal(tissue: tuple[float, float], te: float, tr: float) -> float:
    t1, t2 = tissue
    return (1.0 - math.exp(-tr / t1)) * math.exp(-te / t2)


def rod_level(tissue: tuple[float, float], te: float, tr: float) -> float:
    """Rod intensity: the material's signal windowed so the sampling ranges span ROD_WINDOW."""
    darkest = _tissue_signal(tissue, TE_RANGE_MS[1], TR_RANGE_MS[0])
    brightest = _tissue_signal(tissue, TE_RANGE_MS[0], TR_RANGE_MS[1])
    low, high = ROD_WINDOW
    return low + (high - low) * (_tissue_signal(tissue, te, tr) - darkest) / (brightest - darkest)


def _band(coords: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
    return (coords >= bounds[0]) & (coords <= bounds[1])


def rod_masks(size: int) -> tuple[np.ndarray, np.ndarray]:
    """(TE rod, lit stripes of the TR rod) as boolean masks, before any flip."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    rows = _band(yy, ROD_ROWS)
    stripe = max(1, int(round(size / REFERENCE_SIZE)))
    lit = (np.arange(size) // stripe) % 2 == 0
    return rows & _band(xx, TE_ROD_COLUMNS), rows & _band(xx, TR_ROD_COLUMNS) & lit[None, :]


def render_phantom(
    values: Mapping[str, Any],
    anatomy_seed: int,
    slice_index: int,
    spec: PhantomSpec,
) -> np.ndarray:
    """Render one grayscale slice in [0, 1]. Deterministic in (values, seed, slice).

    Raises:
        PhantomError: If values are invalid under the schema
    """
    settings = spec.channel_settings(values)
    size = spec.image_size
    scale = size / REFERENCE_SIZE
    anatomy = build_anatomy(anatomy_seed, slice_index, size)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    body = anatomy.body.astype(float)

    te = settings.get("te_response", sum(TE_RANGE_MS) / 2)
    tr = settings.get("tr_response", sum(TR_RANGE_MS) / 2)
    fat_fraction = np.clip(1.0 - anatomy.gland - anatomy.muscle, 0.0, 1.0)
    signal = anatomy.density * (
        fat_fraction * _tissue_signal(FAT, te, tr)
        + anatomy.gland * _tissue_signal(GLAND, te, tr)
        + anatomy.muscle * _tissue_signal(MUSCLE, te, tr)
    )
    signal = signal + LESION_ENHANCEMENT * anatomy.lesion
    signal = signal * np.exp(settings.get("bias_field", 0.0) * (xx - 0.5) * body)

    frequency = settings.get("texture_frequency")
    if frequency is not None:
        pattern = np.sin(2 * math.pi * frequency * xx) * np.sin(2 * math.pi * frequency * yy)
        signal = signal * (1.0 + TEXTURE_AMPLITUDE * pattern * body)

    period = settings.get("grid_period")
    if period is not None:
        step = max(2, int(round(period * scale)))
        lines = (np.arange(size) % step == 0).astype(float)
        on_grid = np.maximum(lines[:, None], lines[None, :])
        signal = signal * (1.0 - GRID_LINE_GAIN * on_grid * body)

    amplitude = settings.get("ringing", 0.0)
    if amplitude:
        signal = signal + amplitude * np.cos(2 * math.pi * 6.0 * anatomy.radius) * body

    image = signal * DISPLAY_SCALE + settings.get("plateau", 0.0)
    te_rod, tr_rod = rod_masks(size)
    image[te_rod] = rod_level(TE_ROD, te, tr)
    image[tr_rod] = rod_level(TR_ROD, te, tr)

    blur = settings.get("blur_sigma", 0.0) * scale
    if blur > 0:
        image = gaussian_filter(image, sigma=blur)

    sigma = settings.get("noise_sigma")
    if sigma is not None:
        noise = np.random.default_rng([anatomy_seed, slice_index, 1]).standard_normal((size, size))
        image = image + sigma * noise

    image = np.clip(image, 0.0, 1.0) ** settings.get("gamma", 1.0)

    w = max(1, int(round(settings.get("border_width", 1.0) * scale)))
    image[:w, :] = FRAME_LEVEL
    image[-w:, :] = FRAME_LEVEL
    image[:, :w] = FRAME_LEVEL
    image[:, -w:] = FRAME_LEVEL
    notch = max(1, int(round(2 * scale)))
    for rows in (slice(0, notch), slice(size - notch, size)):
        for cols in (slice(0, notch), slice(size - notch, size)):
            image[rows, cols] = 0.0

    flip = int(settings.get("flip", 0.0))
    if flip & 1:
        image = np.flipud(image)
    if flip & 2:
        image = np.fliplr(image)

    return np.ascontiguousarray(image, dtype=np.float64)


def reference_values(schema: IapSchema) -> dict[str, str]:
    """First category of every categorical IAP, midpoint of the sampling range for TE/TR."""
    ranges = {"te": TE_RANGE_MS, "tr": TR_RANGE_MS}
    values = {}
    for descriptor in schema.descriptors:
        if descriptor.kind is IapKind.CATEGORICAL:
            values[descriptor.name] = descriptor.categories[0]
        else:
            low, high = ranges.get(descriptor.name, (1.0, 2.0))
            values[descriptor.name] = f"{(low + high) / 2:.2f}"
    return values


def identifiability_margin(spec: PhantomSpec, anatomy_seed: int = 0, slice_index: int = 0) -> tuple[float, str]:
    """Smallest mean absolute pixel difference between renders one category step apart.

    Every categorical IAP is walked through its ladder from the reference tuple;
    adjacent steps are the closest settings a channel produces.

    Returns:
        (margin, name of the IAP that attains it)
    """
    base = reference_values(spec.schema)
    margin, weakest = math.inf, ""
    for descriptor in spec.schema.descriptors:
        if descriptor.kind is not IapKind.CATEGORICAL:
            continue
        previous = render_phantom(base, anatomy_seed, slice_index, spec)
        for label in descriptor.categories[1:]:
            current = render_phantom({**base, descriptor.name: label}, anatomy_seed, slice_index, spec)
            difference = float(np.mean(np.abs(current - previous)))
            if difference < margin:
                margin, weakest = difference, descriptor.name
            previous = current
    return margin, weakest


def save_png16(image: np.ndarray, path: Path) -> Path:
    """Save a [0, 1] image as a 16-bit grayscale PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 65535).astype(np.uint16)
    Image.fromarray(pixels).save(path, format="PNG")
    return path


@dataclass
class IapSampler:
    """Draws one IAP tuple per patient. Continuous values are rounded to 0.01 ms."""

    schema: IapSchema
    weights: Mapping[str, Sequence[float]] = field(default_factory=dict)
    continuous_ranges: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: {"te": TE_RANGE_MS, "tr": TR_RANGE_MS}
    )

    def __post_init__(self):
        for name, weights in self.weights.items():
            descriptor = self.schema.descriptor(name)
            if len(weights) != len(descriptor.categories) or min(weights) < 0 or sum(weights) <= 0:
                raise PhantomError(f"Bad sampling weights for IAP '{name}': {list(weights)}")
        for descriptor in self.schema.descriptors:
            if descriptor.kind is IapKind.CONTINUOUS and descriptor.name not in self.continuous_ranges:
                raise PhantomError(f"No sampling range for continuous IAP '{descriptor.name}'")

    def __call__(self, rng: np.random.Generator) -> dict[str, str]:
        values = {}
        for descriptor in self.schema.descriptors:
            if descriptor.kind is IapKind.CATEGORICAL:
                weights = self.weights.get(descriptor.name)
                p = None if weights is None else np.asarray(weights, dtype=float) / sum(weights)
                values[descriptor.name] = descriptor.categories[int(rng.choice(len(descriptor.categories), p=p))]
            else:
                low, high = self.continuous_ranges[descriptor.name]
                values[descriptor.name] = f"{rng.uniform(low, high):.2f}"
        return values

    def describe(self) -> dict[str, Any]:
        return {
            "weights": {k: list(v) for k, v in self.weights.items()},
            "continuous_ranges": {k: list(v) for k, v in self.continuous_ranges.items()},
        }


def downstream_label(anatomy: Anatomy, values: Mapping[str, Any], rule: str, spec: PhantomSpec, domain_iap: str) -> Optional[int]:
    """Binary label planted in anatomy.

    "lesion" marks slices with a lesion positive. "inverted" does the same for
    the first domain value and flips the rule for every other one, mimicking
    slice labels whose meaning shifts between scanners.
    """
    if rule == "none":
        return None
    positive = int(anatomy.has_lesion)
    if rule == "lesion":
        return positive
    descriptor = spec.schema.descriptor(domain_iap)
    domain = descriptor.category_index(values[domain_iap])
    return positive if domain == 0 else 1 - positive


@dataclass(frozen=True)
class Cohort:
    """Generated cohort on disk."""

    out_dir: Path
    manifest_path: Path
    provenance_path: Path
    records: tuple[SliceRecord, ...]
    blanked_patients: tuple[str, ...]


def generate_cohort(
    out_dir: Union[str, Path],
    n_patients: int,
    slices_per_patient: int,
    sampler: Callable[[np.random.Generator], dict[str, str]],
    spec: PhantomSpec,
    seed: int = 0,
    missing_fraction: float = 0.0,
    label_rule: str = "none",
    domain_iap: str = "manufacturer",
) -> Cohort:
    """Render a patient cohort and write PNGs, an ingestion-format manifest and provenance.

    All slices of a patient share one IAP tuple. floor(missing_fraction * n_patients)
    patients get one IAP blanked on one slice.

    Raises:
        PhantomError: On invalid arguments
        OutputError: If out_dir cannot be written
    """
    if n_patients < 1 or slices_per_patient < 1:
        raise PhantomError("Need at least one patient and one slice per patient")
    if not 0.0 <= missing_fraction <= 1.0:
        raise PhantomError(f"missing_fraction must be in [0, 1], got {missing_fraction}")
    if label_rule not in LABEL_RULES:
        raise PhantomError(f"Unknown label rule '{label_rule}'. Must be one of {LABEL_RULES}")
    if label_rule == "inverted":
        if domain_iap not in spec.schema.names or spec.schema.descriptor(domain_iap).kind is not IapKind.CATEGORICAL:
            raise PhantomError(f"Domain IAP '{domain_iap}' must be a categorical schema IAP")

    out_dir = ensure_output_dir(Path(out_dir))
    ensure_output_dir(out_dir / "images")

    margin, weakest = identifiability_margin(spec, anatomy_seed=spec.base_seed)
    if margin < IDENTIFIABILITY_FLOOR:
        logger.warning(
            f"IAP '{weakest}' renders only {margin:.4f} apart between adjacent categories "
            f"(floor {IDENTIFIABILITY_FLOOR}); its ladder saturates"
        )

    root = np.random.SeedSequence(seed)
    patient_seqs = root.spawn(n_patients)
    blank_rng = np.random.default_rng(root.spawn(1)[0])
    n_blank = math.floor(missing_fraction * n_patients + 1e-9)
    blanked = sorted(int(i) for i in blank_rng.choice(n_patients, size=n_blank, replace=False))
    blank_plan = {
        i: (spec.schema.names[int(blank_rng.integers(len(spec.schema.names)))], int(blank_rng.integers(slices_per_patient)))
        for i in blanked
    }

    records = []
    for i, seq in enumerate(tqdm(patient_seqs, desc="patients", disable=None)):
        patient_id = f"P{i:04d}"
        rng = np.random.default_rng(seq)
        values = sampler(rng)
        anatomy_seed = int(seq.generate_state(1, dtype=np.uint32)[0]) ^ spec.base_seed

        for slice_index in range(slices_per_patient):
            image = render_phantom(values, anatomy_seed, slice_index, spec)
            image_path = save_png16(image, out_dir / "images" / patient_id / f"slice_{slice_index:03d}.png")
            anatomy = build_anatomy(anatomy_seed, slice_index, spec.image_size)

            slice_values = dict(values)
            if i in blank_plan and blank_plan[i][1] == slice_index:
                slice_values[blank_plan[i][0]] = ""

            records.append(
                SliceRecord(
                    patient_id=patient_id,
                    slice_index=slice_index,
                    image_ref=image_path,
                    iap_values=slice_values,
                    downstream_label=downstream_label(anatomy, values, label_rule, spec, domain_iap),
                )
            )

    manifest_path = write_manifest(records, out_dir / MANIFEST_NAME, spec.schema.names)
    blanked_ids = tuple(f"P{i:04d}" for i in blanked)
    describe = getattr(sampler, "describe", None)
    provenance_path = write_json(
        out_dir / PROVENANCE_NAME,
        {
            "seed": seed,
            "n_patients": n_patients,
            "slices_per_patient": slices_per_patient,
            "missing_fraction": missing_fraction,
            "blanked_patients": list(blanked_ids),
            "label_rule": label_rule,
            "domain_iap": domain_iap,
            "phantom": spec.to_dict(),
            "identifiability_margin": round(margin, 6),
            "schema": spec.schema.to_dict(),
            "schema_fingerprint": spec.schema.fingerprint,
            "sampler": describe() if callable(describe) else repr(sampler),
        },
    )

    logger.info(f"✓ Generated {n_patients} patients x {slices_per_patient} slices in {out_dir}")
    return Cohort(
        out_dir=out_dir,
        manifest_path=manifest_path,
        provenance_path=provenance_path,
        records=tuple(records),
        blanked_patients=blanked_ids,
    )
