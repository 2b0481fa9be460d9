import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from interpguard.metrics import false_positive_rate, pairwise_auc, roc_auc


def brute_force_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    credit = sum(2 if p > n else 1 if p == n else 0 for p in pos for n in neg)
    return credit / (2 * len(pos) * len(neg))


def test_separated_and_inverted():
    labels = np.array([0, 0, 1, 1])
    assert roc_auc([0.1, 0.2, 0.8, 0.9], labels) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], labels) == 0.0
    assert roc_auc([0.5] * 4, labels) == 0.5


def test_random_scores_match_pairwise_exactly():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(4, 200))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding forces ties
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        expected = brute_force_auc(scores, labels)
        assert roc_auc(scores, labels) == expected
        assert pairwise_auc(scores, labels) == expected


@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=80))
@settings(max_examples=100, deadline=None)
def test_roc_auc_property(pairs):
    scores = np.array([p[0] for p in pairs], dtype=float)
    labels = np.array([p[1] for p in pairs])
    if labels.all() or not labels.any():
        assert np.isnan(roc_auc(scores, labels))
    else:
        assert roc_auc(scores, labels) == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)


def test_false_positive_rate():
    assert false_positive_rate([1, 0, 0, 1], [0, 0, 0, 1]) == pytest.approx(1 / 3)
