"""Skin-lesion classification from clinical photographs fused with patient metadata."""

from .data import (
    BOOL_FIELDS,
    CLINICAL_DIM,
    DIAGNOSES,
    REGIONS,
    ClinicalRecord,
    DatasetManifest,
    FoldAssignment,
    WeightVector,
    class_weights,
    encode_clinical,
    make_folds,
    parse_manifest,
)
from .fusion import (
    FusionConfig,
    FusedClassifier,
    FusionHead,
    HeadSpec,
    build_head,
    fuse_forward,
    reduced_image_features,
    total_features,
)
from .preprocess import (
    AugmentPolicy,
    ColorConstancyConfig,
    augment,
    shades_of_gray,
    standardize,
)

__version__ = "0.1.0"

__all__ = [
    "BOOL_FIELDS", "CLINICAL_DIM", "DIAGNOSES", "REGIONS",
    "ClinicalRecord", "DatasetManifest", "FoldAssignment", "WeightVector",
    "class_weights", "encode_clinical", "make_folds", "parse_manifest",
    "FusionConfig", "FusedClassifier", "FusionHead", "HeadSpec",
    "build_head", "fuse_forward", "reduced_image_features", "total_features",
    "AugmentPolicy", "ColorConstancyConfig", "augment", "shades_of_gray",
    "standardize",
    "__version__",
]
