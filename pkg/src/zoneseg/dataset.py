"""Dataset manifests, subject-level splits, and slice extraction.

A manifest is UTF-8 text, one record per line, four tab-separated
fields: subject_id, volume_path, label_path, split (train|val|test).
Relative paths resolve against the manifest's directory.  Splitting is
always subject-level: a subject's slices never straddle splits.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError
from .mvol import Volume, read_mvol
from .preprocess import center_crop, preprocess_slice
from .rng import derive_rng

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestRecord:
    subject_id: str
    volume_path: str
    label_path: str
    split: str


def write_manifest(records: list[ManifestRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(f"{r.subject_id}\t{r.volume_path}\t{r.label_path}\t{r.split}\n")


def read_manifest(path) -> list[ManifestRecord]:
    base = os.path.dirname(os.path.abspath(path))
    records = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise FormatError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, "
                    f"got {len(fields)}"
                )
            subject_id, volume_path, label_path, split = fields
            if split not in SPLITS:
                raise FormatError(
                    f"{path}:{lineno}: split must be one of {SPLITS}, got {split!r}"
                )
            if subject_id in seen:
                raise FormatError(
                    f"{path}:{lineno}: subject {subject_id!r} appears twice; "
                    f"subjects belong to exactly one split"
                )
            seen.add(subject_id)
            records.append(
                ManifestRecord(
                    subject_id=subject_id,
                    volume_path=os.path.join(base, volume_path)
                    if not os.path.isabs(volume_path)
                    else volume_path,
                    label_path=os.path.join(base, label_path)
                    if not os.path.isabs(label_path)
                    else label_path,
                    split=split,
                )
            )
    return records


def split_dataset(
    records: list[ManifestRecord], train_n: int, val_n: int, test_n: int, seed: int
) -> list[ManifestRecord]:
    """Assign subjects to splits by a seeded subject-level shuffle.

    Counts must sum to the number of records.  The output preserves the
    input record order; only the split tags change.
    """
    if min(train_n, val_n, test_n) < 0:
        raise ValueError("split counts must be non-negative")
    if train_n + val_n + test_n != len(records):
        raise ValueError(
            f"split counts {train_n}+{val_n}+{test_n} != {len(records)} subjects"
        )
    order = derive_rng(seed, "split").permutation(len(records))
    assignment = {}
    for rank, idx in enumerate(order):
        if rank < train_n:
            split = "train"
        elif rank < train_n + val_n:
            split = "val"
        else:
            split = "test"
        assignment[idx] = split
    return [replace(r, split=assignment[i]) for i, r in enumerate(records)]


def slice_volume(volume: Volume, labels: Volume) -> list[tuple[np.ndarray, np.ndarray]]:
    """Paired axial slices, order-preserving along z."""
    if volume.data.shape != labels.data.shape:
        raise ValueError(
            f"volume dims {volume.data.shape} != label dims {labels.data.shape}"
        )
    nz = volume.data.shape[2]
    return [(volume.data[:, :, k], labels.data[:, :, k]) for k in range(nz)]


@dataclass(frozen=True)
class SliceSample:
    """One preprocessed axial slice with its label map."""

    subject_id: str
    slice_index: int
    image: np.ndarray
    labels: np.ndarray

    @property
    def sample_id(self) -> str:
        return f"{self.subject_id}:{self.slice_index}"


def load_slice_samples(
    records: list[ManifestRecord], crop_hw: tuple[int, int] | None
) -> list[SliceSample]:
    """Read volumes and cut them into preprocessed slices.

    Images are center-cropped when larger than ``crop_hw`` and
    z-normalized per slice; label slices get the same crop.  Order
    follows the manifest, then ascending slice index.
    """
    samples = []
    for record in records:
        volume = read_mvol(record.volume_path)
        labels = read_mvol(record.label_path)
        for k, (img, lab) in enumerate(slice_volume(volume, labels)):
            image = preprocess_slice(img, crop_hw)
            lab_out = lab
            if lab.shape != image.shape:
                lab_out = center_crop(lab, image.shape[0], image.shape[1])
            samples.append(
                SliceSample(
                    subject_id=record.subject_id,
                    slice_index=k,
                    image=image,
                    labels=np.ascontiguousarray(lab_out),
                )
            )
    return samples
