"""Test-time augmentation schedules, softmax averaging, ensemble subset search.

Prediction averages softmax outputs over a deterministic set of image
views: a 6x6 grid of same-sized crops (36 views) or four scaled center
crops times four flip states (16 views). Ensembling averages prediction
matrices over configurations and cross-validation models, and an
exhaustive search picks the configuration subset with the best
cross-validation mean sensitivity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .constants import CLASSES, CLASS_INDEX, KNOWN_CLASSES
from .errors import CropTooLarge, IdMismatch, PoolTooLarge
from .imaging import CropBox
from .ioutil import atomic_write
from .metrics import confusion, mean_sensitivity

RR_SCALES = (1.0, 0.875, 0.75, 0.625)
FLIPS = ("none", "h", "v", "hv")
SS_GRID = 6


@dataclass(frozen=True)
class CropSpec:
    """One prediction view: a window, a scale tag and a flip state."""

    mode: str       # "same-size" | "resize"
    rect: CropBox
    scale: float
    flip: str       # one of FLIPS


def crop_schedule_ss(img_dims: tuple[int, int], crop: int) -> list[CropSpec]:
    """36 ordered crop-sized windows on a 6x6 grid of evenly spaced corners."""
    h, w = img_dims
    if crop > min(h, w):
        raise CropTooLarge(f"crop {crop} exceeds image dims {img_dims}")
    xs = [int(np.floor(i * (w - crop) / (SS_GRID - 1) + 0.5)) for i in range(SS_GRID)]
    ys = [int(np.floor(i * (h - crop) / (SS_GRID - 1) + 0.5)) for i in range(SS_GRID)]
    return [CropSpec("same-size", CropBox(x, y, x + crop, y + crop), 1.0, "none")
            for y in ys for x in xs]


def crop_schedule_rr(img_dims: tuple[int, int], input_size: int,
                     scales: Sequence[float] = RR_SCALES) -> list[CropSpec]:
    """16 views: four scaled center crops of the shorter side, each with four flips.

    input_size is the side the consumer resizes each crop to; the schedule
    geometry does not depend on it.
    """
    h, w = img_dims
    if h < 1 or w < 1 or input_size < 1:
        raise ValueError(f"bad dims {img_dims} / input size {input_size}")
    short = min(h, w)
    specs = []
    for scale in scales:
        side = max(1, int(np.floor(short * scale)))
        x0 = (w - side) // 2
        y0 = (h - side) // 2
        rect = CropBox(x0, y0, x0 + side, y0 + side)
        for flip in FLIPS:
            specs.append(CropSpec("resize", rect, scale, flip))
    return specs


def aggregate_predictions(per_view: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of the per-view softmax vectors, in probability space."""
    if len(per_view) == 0:
        raise ValueError("no views to aggregate")
    stack = np.asarray(per_view, dtype=np.float64)
    if np.any(np.abs(stack.sum(axis=-1) - 1.0) > 1e-4):
        raise ValueError("per-view predictions are not row-stochastic")
    return stack.mean(axis=0)


# ---------------------------------------------------------------------------
# Prediction matrices.

@dataclass
class PredictionMatrix:
    """Row-stochastic softmax outputs for a set of images."""

    ids: list[str]
    probs: np.ndarray  # (N, 9)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape != (len(self.ids), len(CLASSES)):
            raise ValueError(f"probs shape {self.probs.shape} does not match "
                             f"{len(self.ids)} ids x {len(CLASSES)} classes")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate image ids in prediction matrix")
        bad = np.abs(self.probs.sum(axis=1) - 1.0) > 1e-6
        if bad.any():
            raise ValueError(f"{int(bad.sum())} prediction rows are not row-stochastic")


def write_predictions(path, pm: PredictionMatrix) -> None:
    """Challenge-submission shape: image plus nine probability columns."""
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", *CLASSES])
        for image, row in zip(pm.ids, pm.probs):
            writer.writerow([image, *(format(v, ".9f") for v in row)])


def read_predictions(path) -> PredictionMatrix:
    ids: list[str] = []
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["image", *CLASSES]:
            raise ValueError(f"{path}: unexpected prediction header {header}")
        for rec in reader:
            ids.append(rec[0])
            rows.append([float(v) for v in rec[1:]])
    return PredictionMatrix(ids, np.array(rows))


@dataclass
class Configuration:
    """One training recipe: per-fold validation matrices, optional test matrices."""

    name: str
    val_folds: dict[int, PredictionMatrix]
    test_folds: dict[int, PredictionMatrix] | None = None


def pooled_validation(cfg: Configuration) -> PredictionMatrix:
    """Concatenate the per-fold validation matrices, rows sorted by image id."""
    merged: dict[str, np.ndarray] = {}
    for fold in sorted(cfg.val_folds):
        pm = cfg.val_folds[fold]
        for image, row in zip(pm.ids, pm.probs):
            if image in merged:
                raise IdMismatch(f"{cfg.name}: image {image} in more than one fold")
            merged[image] = row
    ids = sorted(merged)
    return PredictionMatrix(ids, np.stack([merged[i] for i in ids]))


def _test_average(cfg: Configuration) -> PredictionMatrix:
    if not cfg.test_folds:
        raise ValueError(f"{cfg.name}: no test matrices")
    folds = sorted(cfg.test_folds)
    ids = sorted(cfg.test_folds[folds[0]].ids)
    stacks = []
    for fold in folds:
        pm = cfg.test_folds[fold]
        if sorted(pm.ids) != ids:
            raise IdMismatch(f"{cfg.name}: fold {fold} test ids differ")
        order = np.argsort(pm.ids)
        stacks.append(pm.probs[order])
    return PredictionMatrix(ids, np.mean(stacks, axis=0))


def ensemble_average(subset: Sequence[int], cfgs: Sequence[Configuration],
                     target: str = "validation") -> PredictionMatrix:
    """Average the subset's matrices: over configurations (validation) or
    over configurations and the m per-fold models (test)."""
    if len(subset) == 0:
        raise ValueError("empty configuration subset")
    if target == "validation":
        mats = [pooled_validation(cfgs[i]) for i in subset]
    elif target == "test":
        mats = [_test_average(cfgs[i]) for i in subset]
    else:
        raise ValueError(f"unknown target {target!r}")
    ids = mats[0].ids
    for i, pm in zip(subset, mats[1:]):
        if pm.ids != ids:
            raise IdMismatch(f"configuration {cfgs[subset[0]].name} and "
                             f"{cfgs[i].name} disagree on image ids")
    return PredictionMatrix(ids, np.mean([pm.probs for pm in mats], axis=0))


# ---------------------------------------------------------------------------
# Exhaustive subset search.

@dataclass
class SearchResult:
    subset: tuple[int, ...]
    names: tuple[str, ...]
    score: float
    per_subset_scores: dict[str, float] | None = None


def _labels_for(ids: Sequence[str], labels: Mapping[str, str]) -> np.ndarray:
    missing = [i for i in ids if i not in labels]
    if missing:
        raise ValueError(f"no labels for images {missing[:5]}")
    idx = np.array([CLASS_INDEX[labels[i]] for i in ids])
    present = set(idx.tolist())
    if not set(range(len(KNOWN_CLASSES))) <= present:
        absent = [KNOWN_CLASSES[i] for i in range(len(KNOWN_CLASSES)) if i not in present]
        raise ValueError(f"validation labels do not cover classes {absent}")
    return idx


def search_optimal_subset(cfgs: Sequence[Configuration], labels: Mapping[str, str],
                          guard: int = 20, scoring: str = "pooled",
                          collect_scores: bool = False) -> SearchResult:
    """Enumerate every nonempty configuration subset and keep the best.

    Scoring "pooled" concatenates all validation folds and computes a
    single mean sensitivity from the averaged predictions; "perfold"
    averages the per-fold mean sensitivities instead. Ties prefer smaller
    subsets, then lexicographically smaller index tuples.
    """
    n = len(cfgs)
    if n == 0:
        raise ValueError("empty configuration pool")
    if n > guard:
        raise PoolTooLarge(f"{n} configurations exceed the 2^n guard of {guard}")
    if scoring not in ("pooled", "perfold"):
        raise ValueError(f"unknown scoring {scoring!r}")

    if scoring == "pooled":
        pooled = [pooled_validation(c) for c in cfgs]
        ids = pooled[0].ids
        for c, pm in zip(cfgs[1:], pooled[1:]):
            if pm.ids != ids:
                raise IdMismatch(f"configuration {c.name} has different validation ids")
        y = _labels_for(ids, labels)
        stack = np.stack([pm.probs for pm in pooled])

        def score(indices: tuple[int, ...]) -> float:
            avg = stack[list(indices)].mean(axis=0)
            return mean_sensitivity(confusion(avg, y))
    else:
        fold_ids = sorted(cfgs[0].val_folds)
        per_fold_stack = {}
        per_fold_y = {}
        for fold in fold_ids:
            base = sorted(cfgs[0].val_folds[fold].ids)
            mats = []
            for c in cfgs:
                if fold not in c.val_folds or sorted(c.val_folds[fold].ids) != base:
                    raise IdMismatch(f"configuration {c.name} fold {fold} ids differ")
                pm = c.val_folds[fold]
                mats.append(pm.probs[np.argsort(pm.ids)])
            per_fold_stack[fold] = np.stack(mats)
            per_fold_y[fold] = _labels_for(base, labels)

        def score(indices: tuple[int, ...]) -> float:
            vals = []
            for fold in fold_ids:
                avg = per_fold_stack[fold][list(indices)].mean(axis=0)
                vals.append(mean_sensitivity(confusion(avg, per_fold_y[fold])))
            return float(np.mean(vals))

    best: tuple[int, ...] | None = None
    best_score = -np.inf
    all_scores: dict[str, float] = {}
    for mask in range(1, 1 << n):
        indices = tuple(i for i in range(n) if mask >> i & 1)
        s = score(indices)
        if collect_scores:
            all_scores["+".join(cfgs[i].name for i in indices)] = s
        if (s > best_score
                or (s == best_score and len(indices) < len(best))
                or (s == best_score and len(indices) == len(best) and indices < best)):
            best, best_score = indices, s
    return SearchResult(subset=best,
                        names=tuple(cfgs[i].name for i in best),
                        score=float(best_score),
                        per_subset_scores=all_scores if collect_scores else None)
