"""Split conformal prediction sets over the label space.

Nonconformity for a label instance is 1 - p. Calibration collects the
scores of POSITIVE label instances from the calibration split, sorts them,
and thresholds at the (N+1)(1-epsilon) order statistic; a prediction set
contains every label whose nonconformity falls at or below the threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import CalibrationError, MetricError

DEFAULT_EPSILON = 0.1


def nonconformity(prob_row, y_row) -> np.ndarray:
    """Scores 1 - p for the positive labels of one calibration admission.

    An all-negative row contributes nothing.
    """
    prob_row = np.asarray(prob_row, dtype=np.float64).ravel()
    y_row = np.asarray(y_row).ravel()
    if prob_row.shape != y_row.shape:
        raise ValueError(f"probability row {prob_row.shape} vs label row {y_row.shape}")
    return 1.0 - prob_row[y_row == 1]


def calibrate_threshold(scores, epsilon: float) -> float:
    """The ceil((N+1)(1-eps)) order statistic of the sorted scores, 1-based;
    +inf when that index exceeds N (predict everything)."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    scores = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    n = len(scores)
    if n == 0:
        raise CalibrationError("no calibration scores")
    index = int(np.ceil((n + 1) * (1.0 - epsilon)))
    if index > n:
        return float("inf")
    return float(scores[index - 1])


@dataclass(frozen=True)
class PredictionSet:
    """Labels whose nonconformity clears the calibrated threshold."""

    admission_id: str
    label_indices: tuple[int, ...]
    tau: float
    epsilon: float


def prediction_set_indices(prob_row, tau: float) -> np.ndarray:
    """Indices j with 1 - p_j <= tau (ties included)."""
    prob_row = np.asarray(prob_row, dtype=np.float64).ravel()
    return np.flatnonzero(1.0 - prob_row <= tau)


def conformal_metrics(sets, true_sets, n_labels: int):
    """(coverage, miw, ie) over test admissions.

    coverage: fraction of true label instances captured by their
    admission's set; miw: mean |set| / L over admissions; ie: 1 / miw,
    None when miw is 0.
    """
    if n_labels < 1:
        raise MetricError(f"n_labels must be >= 1, got {n_labels}")
    if len(sets) != len(true_sets):
        raise MetricError(f"{len(sets)} sets vs {len(true_sets)} true sets")
    if not sets:
        raise MetricError("no test admissions")
    covered = 0
    total_true = 0
    widths = []
    for members, true in zip(sets, true_sets):
        members = set(int(j) for j in members)
        widths.append(len(members) / n_labels)
        for j in true:
            total_true += 1
            if int(j) in members:
                covered += 1
    if total_true == 0:
        raise MetricError("coverage undefined: no true labels in the test split")
    coverage = covered / total_true
    miw = float(np.mean(widths))
    ie = None if miw == 0.0 else 1.0 / miw
    return coverage, miw, ie


class ConformalSetPredictor(BaseEstimator):
    """Split conformal set predictor calibrated on positive-label scores.

    Parameters
    ----------
    epsilon : float, default 0.1
        Target miscoverage; prediction sets capture true labels with
        probability >= 1 - epsilon under exchangeability.
    """

    def __init__(self, epsilon: float = DEFAULT_EPSILON):
        self.epsilon = epsilon

    def fit(self, probs, y) -> "ConformalSetPredictor":
        """Calibrate the threshold from probabilities and binary labels of
        the calibration split."""
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        probs = np.asarray(probs, dtype=np.float64)
        y = np.asarray(y)
        if probs.shape != y.shape or probs.ndim != 2:
            raise ValueError(f"probs {probs.shape} and y {y.shape} must be equal 2-D shapes")
        scores = np.concatenate([nonconformity(p, t) for p, t in zip(probs, y)])
        if scores.size == 0:
            raise CalibrationError("calibration split has no positive labels")
        self.scores_ = np.sort(scores)
        self.tau_ = calibrate_threshold(self.scores_, self.epsilon)
        self.n_calibration_ = int(scores.size)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "tau_"):
            raise NotFittedError("ConformalSetPredictor is not calibrated; call fit first")

    def predict(self, probs) -> list[np.ndarray]:
        """Per-admission arrays of label indices in the prediction set."""
        self._check_fitted()
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim == 1:
            probs = probs.reshape(1, -1)
        return [prediction_set_indices(row, self.tau_) for row in probs]

    def score_metrics(self, probs, true_sets, n_labels: int | None = None):
        """(coverage, miw, ie) of this calibrator on a test split."""
        probs = np.asarray(probs, dtype=np.float64)
        sets = self.predict(probs)
        if n_labels is None:
            n_labels = probs.shape[1]
        return conformal_metrics(sets, true_sets, n_labels)
