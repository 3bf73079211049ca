"""Binary ranking metrics computed exactly.

auroc is the Mann-Whitney statistic P(score_pos > score_neg) + 0.5 P(tie);
auprc is the area under the precision-recall step curve with no
interpolation between operating points.  Both handle tied scores.
"""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores/labels must be equal-length 1-d arrays, got {scores.shape} vs {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary 0/1")
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """Area under the ROC curve via tie-aware rank statistics.

    Equals the probability a uniformly random positive outranks a random
    negative, with half credit for ties.  Returns NaN (with a warning) when
    only one class is present.
    """
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        logger.warning("auroc undefined: single-class labels (pos=%d, neg=%d)", n_pos, n_neg)
        return float("nan")

    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # midrank for the tie group [i, j], 1-based
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1

    rank_sum_pos = float(ranks[labels == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auprc(scores, labels) -> float:
    """Area under the precision-recall step curve.

    Thresholds sweep the distinct score values from high to low; the area
    accumulates precision * (recall step) at each threshold, which never
    interpolates between points.  Returns NaN when there are no positives.
    """
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        logger.warning("auprc undefined: no positive labels")
        return float("nan")

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]

    area = 0.0
    tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i:j + 1].sum())
        seen += j + 1 - i
        precision = tp / seen
        recall = tp / n_pos
        area += precision * (recall - prev_recall)
        prev_recall = recall
        i = j + 1
    return area


def mean_std(values) -> tuple[float, float]:
    """Mean and population std over runs, NaN-propagating."""
    arr = np.asarray(values, dtype=np.float64)
    if np.any(np.isnan(arr)):
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())
