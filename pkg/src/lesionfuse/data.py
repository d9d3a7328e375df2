"""Dataset manifest, clinical-metadata encoding, fold assignment and class weights.

A dataset is described by a plain CSV manifest (one lesion per row) plus a
root directory holding the referenced images.  Each lesion carries the
patient-reported clinical fields collected at consultation: age, body
region, and six yes/no findings (itch, bleed, hurt, grew, changed,
elevation).  The encoder turns those eight fields into a fixed 28-slot
vector: one age slot, a 15-way region one-hot and a 2-slot one-hot per
boolean finding.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from sklearn.model_selection import StratifiedGroupKFold, StratifiedKFold

DIAGNOSES = ("ACK", "BCC", "MEL", "NEV", "SCC", "SEK")

REGIONS = (
    "face", "scalp", "nose", "lips", "ears", "neck", "chest", "abdomen",
    "back", "arm", "forearm", "hand", "thigh", "shin", "foot",
)

BOOL_FIELDS = ("itch", "bleed", "hurt", "grew", "changed", "elevation")

# 1 age slot + 15 region slots + six 2-slot boolean one-hots
CLINICAL_DIM = 1 + len(REGIONS) + 2 * len(BOOL_FIELDS)

MANIFEST_COLUMNS = (
    "lesion_id", "patient_id", "image_path", "diagnosis", "age", "region",
    *BOOL_FIELDS,
)


class ManifestError(ValueError):
    """Raised for malformed manifest files or invalid record fields."""


@dataclass(frozen=True)
class ClinicalRecord:
    """One lesion: identifiers, image reference, diagnosis and clinical fields."""

    lesion_id: str
    patient_id: str
    image_path: str
    diagnosis: str
    age: int
    region: str
    itch: bool
    bleed: bool
    hurt: bool
    grew: bool
    changed: bool
    elevation: bool

    def __post_init__(self) -> None:
        if self.diagnosis not in DIAGNOSES:
            raise ManifestError(f"unknown diagnosis {self.diagnosis!r}")
        if self.region not in REGIONS:
            raise ManifestError(f"unknown region {self.region!r}")
        if not isinstance(self.age, int) or isinstance(self.age, bool) or self.age < 0:
            raise ManifestError(f"age must be a non-negative integer, got {self.age!r}")
        for name in BOOL_FIELDS:
            if not isinstance(getattr(self, name), bool):
                raise ManifestError(f"{name} must be a boolean")

    @property
    def flags(self) -> tuple[bool, ...]:
        return tuple(getattr(self, name) for name in BOOL_FIELDS)


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable collection of records plus the image root directory."""

    records: tuple[ClinicalRecord, ...]
    root: Path

    def __post_init__(self) -> None:
        ids = [r.lesion_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = next(i for i, c in Counter(ids).items() if c > 1)
            raise ManifestError(f"duplicate lesion_id {dup!r}")
        object.__setattr__(self, "root", Path(self.root))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ClinicalRecord]:
        return iter(self.records)

    @property
    def by_id(self) -> dict[str, ClinicalRecord]:
        return {r.lesion_id: r for r in self.records}

    def label_histogram(self) -> dict[str, int]:
        counts = Counter(r.diagnosis for r in self.records)
        return {label: counts.get(label, 0) for label in DIAGNOSES if counts.get(label, 0)}

    def labels_present(self) -> tuple[str, ...]:
        present = {r.diagnosis for r in self.records}
        return tuple(label for label in DIAGNOSES if label in present)

    def subset(self, lesion_ids: Iterable[str]) -> tuple[ClinicalRecord, ...]:
        index = self.by_id
        return tuple(index[i] for i in lesion_ids)

    def image_file(self, record: ClinicalRecord) -> Path:
        return self.root / record.image_path


def _parse_row(row: Sequence[str], row_no: int) -> ClinicalRecord:
    if len(row) != len(MANIFEST_COLUMNS):
        raise ManifestError(
            f"row {row_no}: expected {len(MANIFEST_COLUMNS)} columns, got {len(row)}"
        )
    values = dict(zip(MANIFEST_COLUMNS, (v.strip() for v in row)))
    if values["diagnosis"] not in DIAGNOSES:
        raise ManifestError(f"unknown diagnosis {values['diagnosis']!r}, row {row_no}")
    if values["region"] not in REGIONS:
        raise ManifestError(f"unknown region {values['region']!r}, row {row_no}")
    try:
        age = int(values["age"])
    except ValueError:
        raise ManifestError(f"non-integer age {values['age']!r}, row {row_no}") from None
    if age < 0:
        raise ManifestError(f"negative age {age}, row {row_no}")
    flags = {}
    for name in BOOL_FIELDS:
        token = values[name]
        if token not in ("true", "false"):
            raise ManifestError(
                f"column {name!r} must be 'true' or 'false', got {token!r}, row {row_no}"
            )
        flags[name] = token == "true"
    return ClinicalRecord(
        lesion_id=values["lesion_id"],
        patient_id=values["patient_id"],
        image_path=values["image_path"],
        diagnosis=values["diagnosis"],
        age=age,
        region=values["region"],
        **flags,
    )


def parse_manifest(source, root, check_images: bool = True) -> DatasetManifest:
    """Parse a manifest CSV from a path or readable stream.

    Rows are numbered from 1 including the header, matching error messages
    to what an editor shows.  With ``check_images`` every referenced image
    must exist under ``root``.
    """
    root = Path(root)
    if hasattr(source, "read"):
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    else:
        text = Path(source).read_text(encoding="utf-8")

    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("empty manifest") from None
    if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
        raise ManifestError(
            "bad header: expected " + ",".join(MANIFEST_COLUMNS)
        )

    records: list[ClinicalRecord] = []
    seen: set[str] = set()
    for row_no, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        record = _parse_row(row, row_no)
        if record.lesion_id in seen:
            raise ManifestError(f"duplicate lesion_id {record.lesion_id!r}, row {row_no}")
        seen.add(record.lesion_id)
        records.append(record)

    manifest = DatasetManifest(records=tuple(records), root=root)
    if check_images:
        for record in manifest:
            path = manifest.image_file(record)
            if not path.is_file():
                raise ManifestError(f"image not found for {record.lesion_id!r}: {path}")
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> Path:
    """Write the manifest back out in the canonical CSV format."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest:
            writer.writerow(
                [r.lesion_id, r.patient_id, r.image_path, r.diagnosis, str(r.age),
                 r.region] + [str(getattr(r, name)).lower() for name in BOOL_FIELDS]
            )
    return path


def encode_clinical(record: ClinicalRecord, age_scale: float = 100.0) -> np.ndarray:
    """Encode one record into the fixed 28-slot clinical vector.

    Layout: slot 0 is age / age_scale; slots 1-15 the region one-hot in
    ``REGIONS`` order; slots 16-27 the six boolean findings in
    ``BOOL_FIELDS`` order, each as a 2-slot one-hot (false -> [1, 0],
    true -> [0, 1]).  The layout is frozen: stored classifier heads depend
    on it.
    """
    if age_scale <= 0:
        raise ValueError("age_scale must be positive")
    vec = np.zeros(CLINICAL_DIM, dtype=np.float64)
    vec[0] = record.age / age_scale
    vec[1 + REGIONS.index(record.region)] = 1.0
    base = 1 + len(REGIONS)
    for i, value in enumerate(record.flags):
        vec[base + 2 * i + int(value)] = 1.0
    return vec


@dataclass(frozen=True)
class FoldAssignment:
    """Partition of lesion ids into k folds."""

    k: int
    fold_of: Mapping[str, int]

    def members(self, fold: int) -> tuple[str, ...]:
        self._check(fold)
        return tuple(i for i, f in self.fold_of.items() if f == fold)

    def rest(self, fold: int) -> tuple[str, ...]:
        self._check(fold)
        return tuple(i for i, f in self.fold_of.items() if f != fold)

    def _check(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise ValueError(f"fold index {fold} outside [0, {self.k})")


def make_folds(
    manifest: DatasetManifest,
    k: int,
    seed: int,
    group_by_patient: bool = True,
) -> FoldAssignment:
    """Assign every record to one of k folds, stratified by diagnosis.

    With ``group_by_patient`` all lesions of a patient land in the same
    fold (stratification then is best-effort); without it per-fold class
    counts differ from the stratified ideal by at most one sample.
    Deterministic for a fixed seed.
    """
    n = len(manifest)
    if k < 2 or k > n:
        raise ValueError(f"fold count must be in [2, {n}], got {k}")
    labels = np.array([r.diagnosis for r in manifest])
    indices = np.zeros(n)

    if group_by_patient:
        groups = np.array([r.patient_id for r in manifest])
        n_groups = len(set(groups))
        if k > n_groups:
            raise ValueError(
                f"fold count {k} exceeds the number of patients ({n_groups})"
            )
        splitter = StratifiedGroupKFold(n_splits=k, shuffle=True, random_state=seed)
        splits = splitter.split(indices, labels, groups)
    else:
        smallest = min(Counter(labels).values())
        if k > smallest:
            raise ValueError(
                f"fold count {k} exceeds the smallest class size ({smallest}); "
                "stratification impossible"
            )
        splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
        splits = splitter.split(indices, labels)

    fold_of: dict[str, int] = {}
    for fold, (_, test_idx) in enumerate(splits):
        for i in test_idx:
            fold_of[manifest.records[i].lesion_id] = fold
    return FoldAssignment(k=k, fold_of=fold_of)


@dataclass(frozen=True)
class WeightVector:
    """Per-label loss weights, w_label = N / n_label."""

    w: Mapping[str, float]

    def __post_init__(self) -> None:
        for label, value in self.w.items():
            if value <= 0:
                raise ValueError(f"weight for {label} must be positive")

    def as_array(self, labels: Sequence[str]) -> np.ndarray:
        return np.array([self.w[label] for label in labels], dtype=np.float64)


def class_weights(
    records: DatasetManifest | Iterable[ClinicalRecord],
    labels: Sequence[str] | None = None,
) -> WeightVector:
    """Inverse-frequency weights over the given records.

    ``labels`` defaults to the labels present; passing the full training
    label set catches folds that lost a class (weight undefined there).
    """
    counts = Counter(r.diagnosis for r in records)
    total = sum(counts.values())
    if labels is None:
        labels = tuple(label for label in DIAGNOSES if counts.get(label, 0))
    if not labels:
        raise ValueError("no records to weight")
    missing = [label for label in labels if counts.get(label, 0) == 0]
    if missing:
        raise ValueError(
            f"class {missing[0]} absent from training slice; weight undefined"
        )
    return WeightVector(w={label: total / counts[label] for label in labels})
