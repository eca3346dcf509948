"""Manifest ingestion, lesion-grouped stratified folds, class balancing weights.

The main dataset contains multiple images of the same lesion, so folds are
assigned at the lesion level: all images of a lesion land in the same fold.
External images (including the UNK class) never enter a validation fold;
they are appended to every training set instead.
"""

from __future__ import annotations

import csv
import logging
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .constants import CLASSES, CLASS_INDEX, UNK
from .errors import EmptyClass, TooFewLesions
from .ioutil import atomic_write
from .meta import MetaRecord, meta_fields, parse_meta_fields

log = logging.getLogger(__name__)

MANIFEST_HEADER = ["image", "age_approx", "anatom_site_general", "sex", "lesion_id", "label"]


@dataclass(frozen=True)
class ManifestRow:
    image: str
    lesion: str | None
    label: str
    source: str  # "main" | "external"
    meta: MetaRecord


def read_manifest(path, source: str = "main") -> list[ManifestRow]:
    """Read one manifest CSV; every row gets the given source tag.

    UNK labels are only legal in external manifests.
    """
    rows: list[ManifestRow] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: manifest missing columns {sorted(missing)}")
        for rec in reader:
            image = rec["image"].strip()
            label = rec["label"].strip()
            if not image:
                raise ValueError(f"{path}: row with empty image id")
            if label not in CLASSES:
                raise ValueError(f"{path}: image {image} has unknown label {label!r}")
            if label == UNK and source != "external":
                raise ValueError(f"{path}: UNK row {image} in a non-external manifest")
            meta = parse_meta_fields(rec["age_approx"], rec["anatom_site_general"],
                                     rec["sex"], image=image)
            lesion = rec["lesion_id"].strip() or None
            rows.append(ManifestRow(image, lesion, label, source, meta))
    return rows


def load_manifests(main_path, external_path=None) -> list[ManifestRow]:
    """Main manifest plus an optional external one; image ids must be unique."""
    rows = read_manifest(main_path, source="main")
    if external_path is not None:
        rows += read_manifest(external_path, source="external")
    seen = Counter(r.image for r in rows)
    dupes = sorted(i for i, c in seen.items() if c > 1)
    if dupes:
        raise ValueError(f"duplicate image ids in manifests: {dupes[:5]}")
    return rows


def write_manifest(path, rows: Iterable[ManifestRow]) -> None:
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            age, site, sex = meta_fields(r.meta)
            writer.writerow([r.image, age, site, sex, r.lesion or "", r.label])


# ---------------------------------------------------------------------------
# Fold assignment.

def split_folds(rows: Sequence[ManifestRow], m: int = 5, seed: int = 0) -> dict[str, int]:
    """Assign every main-source image to one of m folds.

    Lesion groups (an image without a lesion id is its own group) are
    shuffled per class and dealt cyclically, which stratifies the folds by
    class at the lesion level. Classes with fewer groups than folds degrade
    to unstratified placement on the smallest folds, with a warning.
    Deterministic for a given seed.
    """
    if m < 2:
        raise ValueError(f"need at least 2 folds, got {m}")
    groups: dict[str, list[ManifestRow]] = defaultdict(list)
    for r in rows:
        if r.source != "main":
            continue
        key = r.lesion if r.lesion is not None else f"__solo__{r.image}"
        groups[key].append(r)

    def group_class(members: list[ManifestRow]) -> str:
        counts = Counter(r.label for r in members)
        top = max(counts.values())
        return min((c for c, n in counts.items() if n == top), key=CLASS_INDEX.__getitem__)

    by_class: dict[str, list[str]] = defaultdict(list)
    for key in sorted(groups):
        by_class[group_class(groups[key])].append(key)

    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    fold_sizes = [0] * m
    leftovers: list[str] = []
    for cls in CLASSES:
        keys = by_class.get(cls)
        if not keys:
            continue
        if len(keys) < m:
            warnings.warn(f"class {cls}: {len(keys)} lesion groups for {m} folds, "
                          "splitting unstratified", TooFewLesions)
            leftovers.extend(keys)
            continue
        perm = rng.permutation(len(keys))
        offset = int(rng.integers(m))
        for i, gi in enumerate(perm):
            fold = (offset + i) % m
            for r in groups[keys[gi]]:
                assignment[r.image] = fold
            fold_sizes[fold] += 1
    if leftovers:
        perm = rng.permutation(len(leftovers))
        for gi in perm:
            fold = min(range(m), key=lambda f: (fold_sizes[f], f))
            for r in groups[leftovers[gi]]:
                assignment[r.image] = fold
            fold_sizes[fold] += 1
    return assignment


def assemble_training_set(assignment: Mapping[str, int], rows: Sequence[ManifestRow],
                          val_fold: int) -> tuple[list[ManifestRow], list[ManifestRow]]:
    """Train = main rows outside val_fold + all external rows; val = the fold itself."""
    folds = {assignment[r.image] for r in rows if r.source == "main"}
    if folds and val_fold not in range(max(folds) + 1):
        raise ValueError(f"val_fold {val_fold} outside assignment range")
    train = [r for r in rows
             if r.source == "external" or assignment[r.image] != val_fold]
    val = [r for r in rows
           if r.source == "main" and assignment[r.image] == val_fold]
    return train, val


def class_counts(rows: Iterable[ManifestRow]) -> dict[str, int]:
    """Per-class image counts in canonical class order, present classes only."""
    counts = Counter(r.label for r in rows)
    return {c: counts[c] for c in CLASSES if counts[c] > 0}


def class_weights(counts: Mapping[str, int], k: float = 1.0) -> dict[str, float]:
    """Loss balancing factors (N / N_i)^k; k=0 disables balancing."""
    for cls, n in counts.items():
        if n <= 0:
            raise EmptyClass(f"class {cls} has no examples")
    total = sum(counts.values())
    return {c: (total / n) ** k for c, n in counts.items()}


# ---------------------------------------------------------------------------
# Fold and weight files.

def write_folds(path, assignment: Mapping[str, int]) -> None:
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "fold"])
        for image in sorted(assignment):
            writer.writerow([image, assignment[image]])


def read_folds(path) -> dict[str, int]:
    out: dict[str, int] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out[rec["image"]] = int(rec["fold"])
    return out


def write_weights(path, weights: Mapping[str, float]) -> None:
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "weight"])
        for cls in CLASSES:
            if cls in weights:
                writer.writerow([cls, format(weights[cls], ".9g")])


def read_weights(path) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out[rec["class"]] = float(rec["weight"])
    return out
