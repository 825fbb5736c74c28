"""Ranking metric oracles and properties."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codecast.errors import MetricError
from codecast.metrics import (
    auroc,
    precision_recall_at_k,
    report_from_scores,
    top_k_indices,
)


def test_auroc_frozen_example():
    # scores [0.1, 0.4, 0.35, 0.8], labels [0, 0, 1, 1]: positive 0.8 beats
    # both negatives, positive 0.35 beats one of two: (2 + 1) / 4 = 0.75.
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auroc_perfect_and_inverted():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == pytest.approx(1.0)
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == pytest.approx(0.0)


def test_auroc_all_tied_is_half():
    assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == pytest.approx(0.5)


def test_auroc_single_class_raises():
    with pytest.raises(MetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        auroc([0.1, 0.2], [0, 0])


def test_auroc_length_mismatch():
    with pytest.raises(MetricError):
        auroc([0.1], [0, 1])


@given(
    st.lists(st.floats(min_value=0, max_value=1, allow_nan=False), min_size=2, max_size=12),
    st.integers(min_value=0, max_value=2**32 - 1),
)
@settings(max_examples=80, deadline=None)
def test_auroc_matches_pairwise_oracle(scores, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=len(scores))
    if labels.sum() in (0, len(labels)):
        labels[0] = 1 - labels[0]
    # wins + half-ties over all positive/negative pairs
    wins = ties = total = 0
    for (si, li), (sj, lj) in itertools.product(zip(scores, labels), repeat=2):
        if li == 1 and lj == 0:
            total += 1
            wins += si > sj
            ties += si == sj
    expected = (wins + 0.5 * ties) / total
    assert auroc(scores, labels) == pytest.approx(expected, abs=1e-12)


def test_auroc_duplication_invariance():
    scores = [0.2, 0.7, 0.5, 0.9]
    labels = [0, 1, 0, 1]
    base = auroc(scores, labels)
    assert auroc(scores * 3, labels * 3) == pytest.approx(base)


def test_top_k_ties_take_lower_index():
    assert top_k_indices([0.5, 0.9, 0.5, 0.5], 3).tolist() == [1, 0, 2]
    assert top_k_indices([0.5, 0.5], 5).tolist() == [0, 1]
    with pytest.raises(MetricError):
        top_k_indices([0.5], 0)


def test_precision_recall_example():
    # true set {0, 3}, k=2, top-2 = [1, 3] -> precision 0.5, recall 0.5
    probs = [0.2, 0.9, 0.1, 0.8]
    p, r = precision_recall_at_k(probs, {0, 3}, 2)
    assert (p, r) == (0.5, 0.5)
    p, r = precision_recall_at_k(probs, {1, 3}, 2)
    assert (p, r) == (1.0, 1.0)
    p5, r5 = precision_recall_at_k(probs, {1}, 4)
    assert p5 == pytest.approx(0.25)
    assert r5 == pytest.approx(1.0)


def test_precision_recall_empty_true_set():
    with pytest.raises(MetricError):
        precision_recall_at_k([0.5, 0.5], set(), 1)


def test_report_macro_and_exclusions():
    prob_rows = np.array([
        [0.9, 0.1, 0.8, 0.2],
        [0.1, 0.9, 0.2, 0.8],
        [0.5, 0.5, 0.5, 0.5],
    ])
    true_sets = [{0}, {1, 3}, set()]
    report = report_from_scores(prob_rows, true_sets, ks=(2,))
    assert report.n_admissions == 2
    assert report.n_excluded == 1
    # row 0: top-2 {0, 2}, hit 1 of true 1; row 1: top-2 {1, 3}, hit 2 of 2.
    assert report.precision_at[2] == pytest.approx((0.5 + 1.0) / 2)
    assert report.recall_at[2] == pytest.approx((1.0 + 1.0) / 2)
    # micro-AUROC flattens all 12 pairs, including the empty-set row.
    flat_scores = prob_rows.ravel()
    flat_labels = np.array([1, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0])
    assert report.auroc == pytest.approx(auroc(flat_scores, flat_labels))


def test_report_rejects_all_empty():
    with pytest.raises(MetricError):
        report_from_scores(np.ones((2, 3)) * 0.5, [set(), set()], ks=(1,))


def test_report_shape_mismatch():
    with pytest.raises(MetricError):
        report_from_scores(np.ones((2, 3)), [set()], ks=(1,))
    with pytest.raises(MetricError):
        report_from_scores(np.zeros((0, 3)), [], ks=(1,))


@given(
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=2, max_value=8),
    st.integers(min_value=0, max_value=2**32 - 1),
)
@settings(max_examples=40, deadline=None)
def test_report_recall_bounded(n_adm, n_labels, seed):
    rng = np.random.default_rng(seed)
    probs = rng.random((n_adm, n_labels))
    true_sets = [
        set(rng.choice(n_labels, size=rng.integers(1, n_labels), replace=False).tolist())
        for _ in range(n_adm)
    ]
    report = report_from_scores(probs, true_sets, ks=(n_labels,))
    # k = n_labels covers everything: recall must be exactly 1.
    assert report.recall_at[n_labels] == pytest.approx(1.0)
    assert 0.0 <= report.auroc <= 1.0
