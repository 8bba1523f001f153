"""
IAP Recovery Data Package

Slice manifests, patient-level splits, image preprocessing and the
synthetic phantom cohort generator.
"""

from .ingestion import (
    SliceDataset,
    SliceRecord,
    SplitAssignment,
    exclude_incomplete,
    load_manifest,
    preprocess_image,
    split_by_patient,
)
from .phantom import IapSampler, PhantomSpec, generate_cohort, render_phantom

__all__ = [
    "SliceDataset",
    "SliceRecord",
    "SplitAssignment",
    "exclude_incomplete",
    "load_manifest",
    "preprocess_image",
    "split_by_patient",
    "IapSampler",
    "PhantomSpec",
    "generate_cohort",
    "render_phantom",
]
