"""Metric correctness against independent brute-force oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psvec.metrics import auprc, auroc


def pair_counting_auroc(scores, labels):
    """Oracle: explicit positive/negative pair counting with half-credit ties."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def threshold_sweep_auprc(scores, labels):
    """Oracle: enumerate every distinct score as a threshold, step-wise area."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return float("nan")
    area = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= thr
        tp = int(np.sum(predicted & (labels == 1)))
        precision = tp / int(predicted.sum())
        recall = tp / n_pos
        area += precision * (recall - prev_recall)
        prev_recall = recall
    return area


def test_worked_example():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=1e-12)


def test_perfect_separation():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auprc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == pytest.approx(1.0, abs=1e-12)


def test_all_ties_is_chance():
    assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == pytest.approx(0.5, abs=1e-12)


def test_all_positive_auprc_is_one():
    assert auprc([0.3, 0.9, 0.1], [1, 1, 1]) == pytest.approx(1.0, abs=1e-12)


def test_single_class_is_nan():
    assert math.isnan(auroc([0.1, 0.2], [1, 1]))
    assert math.isnan(auroc([0.1, 0.2], [0, 0]))
    assert math.isnan(auprc([0.1, 0.2], [0, 0]))


def test_validation_errors():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [0, 1, 1])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [0, 2])


def _random_instances(n_instances, max_n=12, seed=20240501):
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        n = int(rng.integers(2, max_n + 1))
        # coarse grid forces plenty of ties
        scores = rng.choice(np.linspace(0.0, 1.0, 5), size=n)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        yield scores, labels


def test_auroc_matches_pair_counting_exhaustively():
    for scores, labels in _random_instances(1000):
        assert abs(auroc(scores, labels) - pair_counting_auroc(scores, labels)) <= 1e-12


def test_auprc_matches_threshold_sweep_exhaustively():
    for scores, labels in _random_instances(1000):
        assert abs(auprc(scores, labels) - threshold_sweep_auprc(scores, labels)) <= 1e-12


score_grid = st.integers(min_value=-20, max_value=20).map(lambda k: k / 4.0)


@settings(max_examples=200, deadline=None)
@given(
    scores=st.lists(score_grid, min_size=2, max_size=12),
    flips=st.data(),
)
def test_monotone_transform_invariance(scores, flips):
    labels = [flips.draw(st.integers(0, 1)) for _ in scores]
    if min(labels) == max(labels):
        labels[0] = 1 - labels[0]
    scores = np.asarray(scores)
    for transform in (lambda x: 2.0 * x + 1.0, lambda x: x ** 3):
        assert auroc(transform(scores), labels) == auroc(scores, labels)
        assert auprc(transform(scores), labels) == auprc(scores, labels)
