"""Challenge metrics: mean sensitivity, per-class sensitivity/specificity, AUC, AUC-S.

Evaluation runs over the eight known classes even though the models emit
nine columns: a softmax argmax landing on UNK is counted as a rejection,
i.e. a false negative for the image's true class.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .constants import KNOWN_CLASSES
from .errors import EmptyClassRow, SingleClassLabels, UnknownLabel
from .ioutil import atomic_write

N_KNOWN = len(KNOWN_CLASSES)


def confusion(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Confusion counts, rows = true class (8), columns = argmax class (9).

    The ninth column collects rejections (argmax on UNK). Argmax ties break
    toward the lowest class index.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= N_KNOWN:
        bad = labels[(labels < 0) | (labels >= N_KNOWN)]
        raise UnknownLabel(f"labels outside the known classes: {np.unique(bad)}")
    preds = probs.argmax(axis=1)
    conf = np.zeros((N_KNOWN, probs.shape[1]), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    return conf


def mean_sensitivity(conf: np.ndarray) -> float:
    """Unweighted mean of per-class recalls TP_i / (TP_i + FN_i)."""
    conf = np.asarray(conf)
    row_totals = conf.sum(axis=1)
    if np.any(row_totals == 0):
        empty = np.nonzero(row_totals == 0)[0]
        raise EmptyClassRow(f"no samples for class rows {empty.tolist()}")
    tp = np.diagonal(conf).astype(np.float64)
    return float(np.mean(tp / row_totals))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise SingleClassLabels("need at least one positive and one negative")
    ordered = np.sort(scores)
    lo = np.searchsorted(ordered, pos, side="left")
    hi = np.searchsorted(ordered, pos, side="right")
    rank_sum = np.sum((lo + hi + 1) / 2.0)  # tie-averaged 1-based ranks
    u = rank_sum - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def roc_points(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ROC polyline (fpr, tpr) from a descending threshold sweep, starting at (0, 0)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassLabels("need at least one positive and one negative")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    is_pos = (labels[order] == 1).astype(np.int64)
    tp = np.cumsum(is_pos)
    fp = np.cumsum(1 - is_pos)
    last_of_group = np.r_[np.nonzero(np.diff(sorted_scores))[0], sorted_scores.size - 1]
    tpr = np.r_[0.0, tp[last_of_group] / n_pos]
    fpr = np.r_[0.0, fp[last_of_group] / n_neg]
    return fpr, tpr


def auc_above_sensitivity(scores: np.ndarray, labels: np.ndarray, floor: float = 0.8,
                          normalized: bool = True) -> float:
    """Area under the ROC curve restricted to TPR >= floor.

    Trapezoid over the polyline with linear interpolation at the floor
    crossing; the raw area tops out at (1 - floor) for a perfect
    classifier, so the default divides by (1 - floor) to report on [0, 1].
    floor=0 reduces to the full AUC.
    """
    if not 0.0 <= floor < 1.0:
        raise ValueError(f"floor must be in [0, 1), got {floor}")
    fpr, tpr = roc_points(scores, labels)
    area = 0.0
    for i in range(1, fpr.size):
        x0, y0 = fpr[i - 1], tpr[i - 1]
        x1, y1 = fpr[i], tpr[i]
        if y1 <= floor or x1 == x0:
            continue
        if y0 >= floor:
            area += ((y0 - floor) + (y1 - floor)) / 2.0 * (x1 - x0)
        else:
            xc = x0 + (floor - y0) / (y1 - y0) * (x1 - x0)
            area += (y1 - floor) / 2.0 * (x1 - xc)
    return float(area / (1.0 - floor)) if normalized else float(area)


@dataclass(frozen=True)
class ClassMetrics:
    auc: float
    auc_s: float
    sensitivity: float
    specificity: float
    auc_s_raw: float


def per_class_metrics(probs: np.ndarray, labels: np.ndarray,
                      floor: float = 0.8) -> dict[str, ClassMetrics]:
    """One-vs-rest metrics per known class from the argmax decision and score column."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    preds = probs.argmax(axis=1)
    report: dict[str, ClassMetrics] = {}
    for i, cls in enumerate(KNOWN_CLASSES):
        pos = labels == i
        if not pos.any() or pos.all():
            raise SingleClassLabels(f"class {cls}: AUC undefined without both outcomes")
        hit = preds == i
        tp = int(np.sum(pos & hit))
        fn = int(np.sum(pos & ~hit))
        fp = int(np.sum(~pos & hit))
        tn = int(np.sum(~pos & ~hit))
        report[cls] = ClassMetrics(
            auc=roc_auc(probs[:, i], pos.astype(np.int64)),
            auc_s=auc_above_sensitivity(probs[:, i], pos.astype(np.int64), floor),
            sensitivity=tp / (tp + fn),
            specificity=tn / (tn + fp),
            auc_s_raw=auc_above_sensitivity(probs[:, i], pos.astype(np.int64), floor,
                                            normalized=False),
        )
    return report


def write_class_report(path, report: dict[str, ClassMetrics], auc_s_raw: bool = False) -> None:
    """CSV with one row per class: class,auc,auc_s,sensitivity,specificity."""
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["class", "auc", "auc_s", "sensitivity", "specificity"]
        if auc_s_raw:
            header.append("auc_s_raw")
        writer.writerow(header)
        for cls in KNOWN_CLASSES:
            if cls not in report:
                continue
            r = report[cls]
            row = [cls] + [format(v, ".6f") for v in
                           (r.auc, r.auc_s, r.sensitivity, r.specificity)]
            if auc_s_raw:
                row.append(format(r.auc_s_raw, ".6f"))
            writer.writerow(row)


def write_summary(path, mean_s: float, report: dict[str, ClassMetrics]) -> None:
    payload = {
        "mean_sensitivity": mean_s,
        "classes": {cls: {"auc": r.auc, "auc_s": r.auc_s,
                          "sensitivity": r.sensitivity, "specificity": r.specificity}
                    for cls, r in report.items()},
    }
    with atomic_write(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
