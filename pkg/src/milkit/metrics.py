"""Patient-level ROC analysis and k-fold summaries."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np


class SingleClassError(ValueError):
    pass


@dataclass
class ScoredSet:
    patient_ids: List[str]
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if not (len(self.patient_ids) == len(self.scores) == len(self.labels)):
            raise ValueError("patient_ids, scores and labels must have equal length")
        if len(set(self.patient_ids)) != len(self.patient_ids):
            raise ValueError("one entry per patient expected")

    @classmethod
    def from_arrays(cls, scores, labels) -> "ScoredSet":
        return cls([str(i) for i in range(len(scores))], scores, labels)


def patient_aggregate(wsi_scores: Sequence[float]) -> float:
    if len(wsi_scores) == 0:
        raise ValueError("no WSI scores for patient")
    return float(np.mean(np.asarray(wsi_scores, dtype=np.float64)))


def aggregate_by_patient(patient_ids: Iterable[str], scores: Iterable[float], labels: Iterable[int]) -> ScoredSet:
    """Average the WSI scores of each patient; patients appear in first-seen order."""
    by_patient: Dict[str, List[float]] = defaultdict(list)
    label_of: Dict[str, int] = {}
    for pid, s, y in zip(patient_ids, scores, labels):
        by_patient[pid].append(float(s))
        if label_of.setdefault(pid, int(y)) != int(y):
            raise ValueError(f"patient {pid!r} has conflicting labels")
    pids = list(by_patient)
    return ScoredSet(pids, [patient_aggregate(by_patient[p]) for p in pids], [label_of[p] for p in pids])


def _as_arrays(scored):
    if isinstance(scored, ScoredSet):
        return scored.scores, scored.labels
    scores, labels = scored
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=int)


def _class_counts(labels):
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs both classes present")
    return n_pos, n_neg


def roc_auc(scored) -> float:
    """Mann-Whitney AUC: (wins + 0.5 * ties) / (n_pos * n_neg).

    Counts are accumulated as integers over groups of equal score, so the
    result is exactly the pairwise-counting value.
    """
    scores, labels = _as_arrays(scored)
    n_pos, n_neg = _class_counts(labels)
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    y = labels[order]
    wins = 0
    ties = 0
    neg_below = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        grp_pos = int(np.sum(y[i:j] == 1))
        grp_neg = (j - i) - grp_pos
        wins += grp_pos * neg_below
        ties += grp_pos * grp_neg
        neg_below += grp_neg
        i = j
    return (wins + 0.5 * ties) / (n_pos * n_neg)


def roc_curve(scored) -> List[Tuple[float, float, float]]:
    """ROC points ``(fpr, tpr, threshold)`` from (0, 0) to (1, 1).

    A point is emitted per distinct score, predicting positive for
    ``score >= threshold``. The first point uses threshold ``inf``.
    """
    scores, labels = _as_arrays(scored)
    n_pos, n_neg = _class_counts(labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int(np.sum(y[i:j] == 1))
        fp += int(np.sum(y[i:j] == 0))
        points.append((fp / n_neg, tp / n_pos, float(s[i])))
        i = j
    return points


def curve_area(points) -> float:
    area = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(points[:-1], points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def kfold_report(fold_aucs: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample (n-1) standard deviation over folds."""
    x = np.asarray(fold_aucs, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two folds")
    return float(x.mean()), float(x.std(ddof=1))


def write_roc_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in points:
            w.writerow([repr(fpr), repr(tpr), repr(thr)])


def write_fold_csv(path, fold_aucs: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "auc"])
        for k, auc in enumerate(fold_aucs):
            w.writerow([k, repr(float(auc))])
