"""Estimator facade: fit on a cohort, predict next-admission code
probabilities, evaluate ranking metrics, and calibrate prediction sets."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import Checkpoint
from .conformal import ConformalSetPredictor
from .encoding import HashingTextEncoder, TextEncoder
from .ingestion import AdmissionRecord
from .metrics import DEFAULT_KS, MetricReport, report_from_scores
from .params import ModelDims
from .training import (
    TrainConfig,
    TrainResult,
    patient_probabilities,
    split_cohort,
    train_model,
)

Patients = Sequence[Sequence[AdmissionRecord]]


def true_label_sets(patients: Patients, vocab_index: dict[str, int]) -> list[set[int]]:
    """In-vocabulary label-index sets of each patient's final admission."""
    return [
        {vocab_index[c] for c in records[-1].codes if c in vocab_index}
        for records in patients
    ]


def final_row_probabilities(
    patients: Patients,
    params,
    encoder: TextEncoder,
    temperature: float,
    use_graph: bool = True,
) -> np.ndarray:
    """Final-context-slice probability row per patient, stacked (n, L)."""
    rows = [
        patient_probabilities(records, params, encoder, temperature, use_graph)[0][-1]
        for records in patients
    ]
    return np.stack(rows)


def evaluate_split(
    patients: Patients,
    params,
    encoder: TextEncoder,
    temperature: float,
    vocab: Sequence[str],
    ks=DEFAULT_KS,
    use_graph: bool = True,
) -> MetricReport:
    """Ranking metrics of final-admission predictions over a split."""
    vocab_index = {c: i for i, c in enumerate(vocab)}
    probs = final_row_probabilities(patients, params, encoder, temperature, use_graph)
    return report_from_scores(probs, true_label_sets(patients, vocab_index), ks)


class GraphCodePredictor(BaseEstimator):
    """Next-admission ICD code predictor over learned causal graphs.

    fit() splits the cohort by patient 70/10/20, trains with Adam and
    early stopping on validation Recall@20, and keeps the best snapshot.
    Defaults mirror the documented training setup; the reduced-size knobs
    exist so tests can run at desk scale.
    """

    def __init__(
        self,
        embed_dim: int = 768,
        proj_dim: int = 128,
        pool_hidden: int = 128,
        pooled_dim: int = 64,
        learning_rate: float = 1e-4,
        weight_decay: float = 1e-5,
        batch_size: int = 16,
        dropout: float = 0.1,
        max_epochs: int = 50,
        patience: int = 5,
        focal_alpha: float = 0.25,
        focal_gamma: float = 2.0,
        lambda_acyc: float = 0.1,
        lambda_l1: float = 0.01,
        temp_start: float = 1.0,
        temp_end: float = 0.1,
        seed: int = 0,
        epsilon: float = 0.1,
        use_graph: bool = True,
        encoder: TextEncoder | None = None,
    ):
        self.embed_dim = embed_dim
        self.proj_dim = proj_dim
        self.pool_hidden = pool_hidden
        self.pooled_dim = pooled_dim
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.dropout = dropout
        self.max_epochs = max_epochs
        self.patience = patience
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.lambda_acyc = lambda_acyc
        self.lambda_l1 = lambda_l1
        self.temp_start = temp_start
        self.temp_end = temp_end
        self.seed = seed
        self.epsilon = epsilon
        self.use_graph = use_graph
        self.encoder = encoder

    def _dims(self) -> ModelDims:
        return ModelDims(
            embed_dim=self.embed_dim,
            proj_dim=self.proj_dim,
            pool_hidden=self.pool_hidden,
            pooled_dim=self.pooled_dim,
        )

    def _config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            dropout=self.dropout,
            max_epochs=self.max_epochs,
            patience=self.patience,
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
            lambda_acyc=self.lambda_acyc,
            lambda_l1=self.lambda_l1,
            temp_start=self.temp_start,
            temp_end=self.temp_end,
            seed=self.seed,
            epsilon=self.epsilon,
        )

    def _make_encoder(self) -> TextEncoder:
        return self.encoder if self.encoder is not None else HashingTextEncoder(self.embed_dim)

    def fit(self, X: Patients, y=None, history_path=None) -> "GraphCodePredictor":
        """Split, train, and keep the best-validation snapshot."""
        patients = list(X)
        split = split_cohort(len(patients), self.seed)
        encoder = self._make_encoder()
        result = train_model(
            [patients[i] for i in split.train],
            [patients[i] for i in split.valid],
            self._config(),
            self._dims(),
            encoder,
            use_graph=self.use_graph,
            history_path=history_path,
        )
        self.split_ = split
        self.encoder_ = encoder
        self.params_ = result.params
        self.label_vocab_ = result.label_vocab
        self.vocab_index_ = {c: i for i, c in enumerate(result.label_vocab)}
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.temperature_ = result.best_temperature
        self.result_ = result
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError("GraphCodePredictor is not fitted; call fit first")

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint,
                        encoder: TextEncoder | None = None) -> "GraphCodePredictor":
        """Rebuild a fitted predictor from a deserialized checkpoint."""
        cfg, dims = checkpoint.config, checkpoint.dims
        est = cls(
            embed_dim=dims.embed_dim,
            proj_dim=dims.proj_dim,
            pool_hidden=dims.pool_hidden,
            pooled_dim=dims.pooled_dim,
            learning_rate=cfg.learning_rate,
            weight_decay=cfg.weight_decay,
            batch_size=cfg.batch_size,
            dropout=cfg.dropout,
            max_epochs=cfg.max_epochs,
            patience=cfg.patience,
            focal_alpha=cfg.focal_alpha,
            focal_gamma=cfg.focal_gamma,
            lambda_acyc=cfg.lambda_acyc,
            lambda_l1=cfg.lambda_l1,
            temp_start=cfg.temp_start,
            temp_end=cfg.temp_end,
            seed=cfg.seed,
            epsilon=cfg.epsilon,
            use_graph=checkpoint.use_graph,
            encoder=encoder,
        )
        est.encoder_ = est._make_encoder()
        est.params_ = checkpoint.restore_params()
        est.label_vocab_ = list(checkpoint.label_vocab)
        est.vocab_index_ = {c: i for i, c in enumerate(est.label_vocab_)}
        est.history_ = []
        est.best_epoch_ = checkpoint.best_epoch
        est.temperature_ = checkpoint.temperature
        return est

    def predict_proba(self, X: Patients) -> np.ndarray:
        """Per-patient final-slice label probabilities, (n, L)."""
        self._check_fitted()
        return final_row_probabilities(
            X, self.params_, self.encoder_, self.temperature_, self.use_graph
        )

    def predict_topk(self, X: Patients, k: int = 20) -> list[list[str]]:
        """Top-k label strings per patient, ties broken by vocabulary order."""
        from .metrics import top_k_indices

        probs = self.predict_proba(X)
        return [[self.label_vocab_[j] for j in top_k_indices(row, k)] for row in probs]

    def evaluate(self, X: Patients, ks=DEFAULT_KS) -> MetricReport:
        """Ranking metrics on the given patients' final admissions."""
        self._check_fitted()
        return evaluate_split(
            X, self.params_, self.encoder_, self.temperature_,
            self.label_vocab_, ks, self.use_graph,
        )

    def calibrate(self, X: Patients, epsilon: float | None = None) -> ConformalSetPredictor:
        """Fit a conformal set predictor on the given calibration patients."""
        self._check_fitted()
        probs = self.predict_proba(X)
        y = np.zeros_like(probs)
        for i, true in enumerate(true_label_sets(X, self.vocab_index_)):
            for j in true:
                y[i, j] = 1
        calibrator = ConformalSetPredictor(
            epsilon=self.epsilon if epsilon is None else epsilon
        )
        return calibrator.fit(probs, y)
