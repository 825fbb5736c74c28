"""Threshold-free ranking metrics: AUROC, Precision@K, Recall@K."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError

DEFAULT_KS = (10, 20)


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties 0.5.

    Computed with the rank-sum identity in O(n log n).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise MetricError(f"scores and labels differ in length: {len(scores)} vs {len(labels)}")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC is undefined on single-class input")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken by lower index."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if k < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    order = np.argsort(-scores, kind="mergesort")
    return order[: min(k, len(scores))]


def precision_recall_at_k(prob_row, true_set, k: int) -> tuple[float, float]:
    """Top-k precision and recall for one admission."""
    true_set = set(true_set)
    if not true_set:
        raise MetricError("precision/recall@k undefined for an empty true set")
    top = top_k_indices(prob_row, k)
    hits = sum(1 for idx in top if int(idx) in true_set)
    return hits / k, hits / len(true_set)


@dataclass
class MetricReport:
    """Ranking metrics over one evaluation split."""

    auroc: float
    precision_at: dict[int, float] = field(default_factory=dict)
    recall_at: dict[int, float] = field(default_factory=dict)
    n_admissions: int = 0
    n_excluded: int = 0


def report_from_scores(prob_rows, true_sets, ks=DEFAULT_KS) -> MetricReport:
    """Aggregate metrics from per-admission probability rows.

    AUROC is micro-averaged over the flattened (admission, label) pairs.
    P@K and R@K are macro-averaged over admissions; admissions with no
    true labels are excluded from those averages and counted.
    """
    prob_rows = np.asarray(prob_rows, dtype=np.float64)
    if prob_rows.ndim != 2:
        raise MetricError(f"prob_rows must be 2-D, got shape {prob_rows.shape}")
    if prob_rows.shape[0] != len(true_sets):
        raise MetricError(
            f"{prob_rows.shape[0]} probability rows but {len(true_sets)} true sets"
        )
    if prob_rows.shape[0] == 0:
        raise MetricError("no admissions to evaluate")
    n, n_labels = prob_rows.shape
    flat_labels = np.zeros((n, n_labels), dtype=np.int64)
    for i, true in enumerate(true_sets):
        for j in true:
            if 0 <= j < n_labels:
                flat_labels[i, j] = 1
    micro_auroc = auroc(prob_rows.ravel(), flat_labels.ravel())

    precision_at: dict[int, float] = {}
    recall_at: dict[int, float] = {}
    included = [i for i, true in enumerate(true_sets) if true]
    n_excluded = n - len(included)
    for k in ks:
        if not included:
            raise MetricError("every admission has an empty true set")
        ps, rs = [], []
        for i in included:
            p, r = precision_recall_at_k(prob_rows[i], true_sets[i], k)
            ps.append(p)
            rs.append(r)
        precision_at[k] = float(np.mean(ps))
        recall_at[k] = float(np.mean(rs))
    return MetricReport(
        auroc=micro_auroc,
        precision_at=precision_at,
        recall_at=recall_at,
        n_admissions=len(included),
        n_excluded=n_excluded,
    )
