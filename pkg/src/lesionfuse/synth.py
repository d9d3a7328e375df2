"""Synthetic lesion dataset with controllable label signal per source.

Generates small photo-like images plus clinical metadata whose label signal
strength is dialed independently per source.  ``informativeness.image``
blends each image's base color between a random color (0: no signal) and a
per-label signature color (1: strong signal); ``informativeness.clinical``
blends the metadata distributions between label-independent baselines and
per-label signatures.  The per-label signatures follow the clinical
folklore for these lesion classes: the pigmented ones itch, the carcinomas
hurt and bleed, only melanomas tend to change pattern, nevi skew young.

This is desk-scale stand-in data for pipeline work, not a substitute for a
real dataset; reports over it are labeled synthetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    BOOL_FIELDS,
    DIAGNOSES,
    REGIONS,
    ClinicalRecord,
    DatasetManifest,
    write_manifest,
)
from .preprocess import save_image


@dataclass(frozen=True)
class Informativeness:
    """Label-signal strength per source, each in [0, 1]."""

    image: float = 0.6
    clinical: float = 0.6

    def __post_init__(self) -> None:
        for name in ("image", "clinical"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"informativeness.{name} must lie in [0, 1]")


# Default imbalanced label mix (fractions of the six classes).
DEFAULT_CLASS_PROPORTIONS = {
    "ACK": 543 / 1612,
    "BCC": 442 / 1612,
    "MEL": 67 / 1612,
    "NEV": 196 / 1612,
    "SCC": 149 / 1612,
    "SEK": 215 / 1612,
}


@dataclass(frozen=True)
class _LabelSignature:
    color: tuple[float, float, float]
    region: str
    # itch, bleed, hurt, grew, changed, elevation
    flags: tuple[float, float, float, float, float, float]
    age_mean: float
    age_std: float


# Signature colors keep the carcinoma pair (BCC/SCC) nearly identical and the
# pigmented trio close, so images alone cannot fully separate the classes —
# the metadata signal has to supply the rest, as in the real task.
_SIGNATURES = {
    "ACK": _LabelSignature((0.85, 0.45, 0.35), "forearm", (0.10, 0.50, 0.05, 0.25, 0.08, 0.08), 58, 9),
    "BCC": _LabelSignature((0.76, 0.55, 0.45), "nose",    (0.30, 0.80, 0.80, 0.80, 0.12, 0.88), 63, 9),
    "MEL": _LabelSignature((0.25, 0.18, 0.15), "face",    (0.80, 0.10, 0.08, 0.85, 0.85, 0.10), 62, 9),
    "NEV": _LabelSignature((0.45, 0.32, 0.22), "back",    (0.75, 0.05, 0.05, 0.75, 0.10, 0.80), 32, 8),
    "SCC": _LabelSignature((0.78, 0.50, 0.40), "ears",    (0.35, 0.85, 0.88, 0.82, 0.15, 0.90), 66, 9),
    "SEK": _LabelSignature((0.55, 0.45, 0.30), "chest",   (0.70, 0.08, 0.06, 0.78, 0.10, 0.85), 66, 9),
}

_REGION_PEAK = 0.95          # modal-region mass at full clinical signal
_AGE_POP_MEAN, _AGE_POP_STD = 55.0, 18.0


def apportion(size: int, proportions: dict[str, float]) -> dict[str, int]:
    """Largest-remainder split of ``size`` samples over the classes."""
    if size < 1:
        raise ValueError("size must be positive")
    labels = [label for label in DIAGNOSES if label in proportions]
    if sorted(labels) != sorted(proportions):
        raise ValueError("proportions must be keyed by known diagnoses")
    values = np.array([proportions[label] for label in labels], dtype=np.float64)
    if np.any(values <= 0):
        raise ValueError("every class proportion must be positive")
    if abs(values.sum() - 1.0) > 1e-9:
        raise ValueError("class proportions must sum to 1")
    shares = values * size
    counts = np.floor(shares).astype(int)
    remainder = size - counts.sum()
    for idx in np.argsort(-(shares - counts))[:remainder]:
        counts[idx] += 1
    if np.any(counts == 0):
        raise ValueError("size too small: a class received zero samples")
    return dict(zip(labels, counts.tolist()))


def _region_distribution(label: str, strength: float) -> np.ndarray:
    flat = np.full(len(REGIONS), 1.0 / len(REGIONS))
    peaked = np.full(len(REGIONS), (1.0 - _REGION_PEAK) / (len(REGIONS) - 1))
    peaked[REGIONS.index(_SIGNATURES[label].region)] = _REGION_PEAK
    return (1.0 - strength) * flat + strength * peaked


def sample_clinical_fields(
    label: str, informativeness_clinical: float, rng: np.random.Generator
) -> dict:
    """Draw age, region and the six boolean findings for one sample."""
    sig = _SIGNATURES[label]
    b = informativeness_clinical
    region = rng.choice(len(REGIONS), p=_region_distribution(label, b))
    flags = {}
    for name, p_sig in zip(BOOL_FIELDS, sig.flags):
        p = 0.5 + b * (p_sig - 0.5)
        flags[name] = bool(rng.uniform() < p)
    age_mean = (1.0 - b) * _AGE_POP_MEAN + b * sig.age_mean
    age_std = (1.0 - b) * _AGE_POP_STD + b * sig.age_std
    age = int(np.clip(round(rng.normal(age_mean, age_std)), 0, 100))
    return {"age": age, "region": REGIONS[int(region)], **flags}


def render_image(
    label: str, informativeness_image: float, rng: np.random.Generator, side: int = 64
) -> np.ndarray:
    """Noisy color-field image whose base color carries the label signal."""
    a = informativeness_image
    base = a * np.array(_SIGNATURES[label].color) + (1.0 - a) * rng.uniform(0.15, 0.85, size=3)
    coarse = rng.normal(0.0, 0.05, size=(4, 4, 3))
    lowfreq = coarse.repeat(side // 4 + 1, axis=0).repeat(side // 4 + 1, axis=1)[:side, :side]
    image = base + lowfreq + rng.normal(0.0, 0.06, size=(side, side, 3))
    return np.clip(image, 0.0, 1.0)


def generate_synthetic(
    out_dir,
    size: int,
    class_proportions: dict[str, float] | None = None,
    informativeness: Informativeness = Informativeness(),
    seed: int = 0,
    image_side: int = 64,
    patient_repeat_prob: float = 0.25,
) -> DatasetManifest:
    """Write a synthetic dataset (images/ + manifest.csv) and return its manifest.

    Deterministic per seed.  A fraction of consecutive records share a
    patient id so patient-grouped fold assignment has something to group.
    """
    proportions = class_proportions or DEFAULT_CLASS_PROPORTIONS
    counts = apportion(size, proportions)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    sequence = [label for label in DIAGNOSES if label in counts for _ in range(counts[label])]
    rng.shuffle(sequence)

    records = []
    patient_serial = 0
    previous_patient = None
    for idx, label in enumerate(sequence):
        if previous_patient is not None and rng.uniform() < patient_repeat_prob:
            patient = previous_patient
        else:
            patient = f"p{patient_serial:05d}"
            patient_serial += 1
        previous_patient = patient

        lesion_id = f"s{idx:05d}"
        image_path = f"images/{lesion_id}.png"
        image = render_image(label, informativeness.image, rng, side=image_side)
        save_image(image, out_dir / image_path)
        fields = sample_clinical_fields(label, informativeness.clinical, rng)
        records.append(ClinicalRecord(
            lesion_id=lesion_id,
            patient_id=patient,
            image_path=image_path,
            diagnosis=label,
            **fields,
        ))

    manifest = DatasetManifest(records=tuple(records), root=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
