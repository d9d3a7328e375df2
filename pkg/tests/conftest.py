from __future__ import annotations

import numpy as np
import pytest

from lesionfuse.data import BOOL_FIELDS, ClinicalRecord, DatasetManifest
from lesionfuse.preprocess import save_image

LABEL_COLORS = {
    "ACK": (0.9, 0.2, 0.2),
    "BCC": (0.2, 0.9, 0.2),
    "MEL": (0.1, 0.1, 0.3),
    "NEV": (0.6, 0.4, 0.2),
    "SCC": (0.9, 0.9, 0.2),
    "SEK": (0.3, 0.7, 0.8),
}


def make_record(
    lesion_id="l0",
    patient_id="p0",
    image_path="images/l0.png",
    diagnosis="ACK",
    age=50,
    region="face",
    **flags,
) -> ClinicalRecord:
    values = {name: False for name in BOOL_FIELDS}
    values.update(flags)
    return ClinicalRecord(
        lesion_id=lesion_id,
        patient_id=patient_id,
        image_path=image_path,
        diagnosis=diagnosis,
        age=age,
        region=region,
        **values,
    )


def make_manifest(records, root="/nonexistent") -> DatasetManifest:
    return DatasetManifest(records=tuple(records), root=root)


def image_manifest(root, counts: dict[str, int], side=16, seed=0,
                   noise=0.15) -> DatasetManifest:
    """Write label-colored noise images and return their manifest."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    i = 0
    for label, n in counts.items():
        for _ in range(n):
            image = np.clip(
                np.array(LABEL_COLORS[label])
                + rng.normal(0, noise, size=(side, side, 3)),
                0, 1,
            )
            path = f"images/l{i:04d}.png"
            save_image(image, root / path)
            records.append(make_record(
                lesion_id=f"l{i:04d}", patient_id=f"p{i:04d}",
                image_path=path, diagnosis=label,
                age=int(rng.integers(20, 90)),
            ))
            i += 1
    return DatasetManifest(records=tuple(records), root=root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
