"""Stage 4: prediction head, focal loss, combined objective, Adam with
decoupled weight decay, temperature annealing, and the training loop with
early stopping on validation Recall@20.

Determinism contract: given the same cohort and config, training produces
bit-identical parameters and history. All stochasticity flows through rng
streams derived from (seed, epoch, patient index); nothing reads the clock.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .encoding import TextEncoder
from .errors import CohortValidationError, ConfigurationError
from .graph import forward_trajectory
from .ingestion import AdmissionRecord
from .metrics import precision_recall_at_k
from .params import ModelDims, ModelParams

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    """Optimizer and objective settings."""

    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    dropout: float = 0.1
    max_epochs: int = 50
    patience: int = 5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lambda_acyc: float = 0.1
    lambda_l1: float = 0.01
    temp_start: float = 1.0
    temp_end: float = 0.1
    seed: int = 0
    epsilon: float = 0.1

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_epochs < 1:
            raise ConfigurationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ConfigurationError(f"focal_alpha must be in [0, 1], got {self.focal_alpha}")
        if self.focal_gamma < 0:
            raise ConfigurationError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.lambda_acyc < 0 or self.lambda_l1 < 0:
            raise ConfigurationError("penalty weights must be >= 0")
        if not self.temp_start >= self.temp_end > 0:
            raise ConfigurationError(
                f"need temp_start >= temp_end > 0, got {self.temp_start}, {self.temp_end}"
            )
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigurationError(f"epsilon must be in (0, 1), got {self.epsilon}")


def predict_probs(pooled: ad.Tensor, params: ModelParams) -> ad.Tensor:
    """Sigmoid label probabilities, one row per context slice."""
    if params.n_labels < 1:
        raise ConfigurationError("label vocabulary is empty")
    return ad.sigmoid(ad.add_rowvec(ad.matmul(pooled, params.head_w), params.head_b))


def focal_loss(probs: ad.Tensor, targets: np.ndarray, alpha: float, gamma: float) -> ad.Tensor:
    """-sum[ a y (1-p)^g ln p + (1-a)(1-y) p^g ln(1-p) ], p clamped to
    [1e-7, 1-1e-7]."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != probs.shape:
        raise ad.ShapeError(f"targets {targets.shape} vs probs {probs.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    p = ad.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ones = ad.constant(np.ones(probs.shape))
    y = ad.constant(targets)
    y_neg = ad.constant(1.0 - targets)
    one_minus_p = ad.add(ones, ad.scale(p, -1.0))
    pos = ad.hadamard(y, ad.hadamard(ad.pow_const(one_minus_p, gamma), ad.log(p)))
    neg = ad.hadamard(y_neg, ad.hadamard(ad.pow_const(p, gamma), ad.log(one_minus_p)))
    total = ad.add(ad.scale(ad.sum_all(pos), alpha), ad.scale(ad.sum_all(neg), 1.0 - alpha))
    return ad.scale(total, -1.0)


def total_loss(
    probs: ad.Tensor,
    targets: np.ndarray,
    acyc: ad.Tensor,
    l1: ad.Tensor,
    config: TrainConfig,
) -> ad.Tensor:
    """Focal loss plus weighted acyclicity and sparsity penalties."""
    loss = focal_loss(probs, targets, config.focal_alpha, config.focal_gamma)
    if config.lambda_acyc != 0.0:
        loss = ad.add(loss, ad.scale(acyc, config.lambda_acyc))
    if config.lambda_l1 != 0.0:
        loss = ad.add(loss, ad.scale(l1, config.lambda_l1))
    return loss


def anneal_temperature(epoch: int, config: TrainConfig) -> float:
    """Geometric interpolation from temp_start to temp_end across epochs."""
    if not 0 <= epoch < config.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.max_epochs})")
    if config.max_epochs == 1:
        return config.temp_start
    frac = epoch / (config.max_epochs - 1)
    return float(config.temp_start * (config.temp_end / config.temp_start) ** frac)


class Adam:
    """Adam with decoupled weight decay.

    The decay step is theta -= lr * wd * theta, applied independently of
    the adaptive update, so a zero-gradient step changes parameters by
    exactly that amount.
    """

    def __init__(
        self,
        params: dict[str, ad.Tensor],
        learning_rate: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(p.shape) for name, p in params.items()}
        self.v = {name: np.zeros(p.shape) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros(p.shape)
            self.m[name] = b1 * self.m[name] + (1 - b1) * grad
            self.v[name] = b2 * self.v[name] + (1 - b2) * grad * grad
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            if self.weight_decay:
                p.data = p.data - self.learning_rate * self.weight_decay * p.data
            p.data = p.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam_m.{name}"] = self.m[name].copy()
            out[f"adam_v.{name}"] = self.v[name].copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name] = arrays[f"adam_m.{name}"].copy()
            self.v[name] = arrays[f"adam_v.{name}"].copy()


@dataclass
class Split:
    """Patient-level train/valid/test split, stored as indices into the
    patient list."""

    train: list[int]
    valid: list[int]
    test: list[int]


def split_cohort(n_patients: int, seed: int, fractions=(0.7, 0.1, 0.2)) -> Split:
    """Deterministic 70/10/20 patient split."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {fractions}")
    order = np.random.default_rng([seed, 17]).permutation(n_patients)
    n_train = int(n_patients * fractions[0])
    n_valid = int(n_patients * fractions[1])
    split = Split(
        train=[int(i) for i in order[:n_train]],
        valid=[int(i) for i in order[n_train:n_train + n_valid]],
        test=[int(i) for i in order[n_train + n_valid:]],
    )
    if not split.train:
        raise ConfigurationError(f"training split is empty for {n_patients} patients")
    if not split.valid or not split.test:
        raise CohortValidationError(
            f"{n_patients} patients leave an empty validation or test split"
        )
    return split


def build_label_vocab(patients: Sequence[Sequence[AdmissionRecord]]) -> list[str]:
    """Sorted union of normalized codes across the given patients."""
    vocab = set()
    for admissions in patients:
        for rec in admissions:
            vocab.update(rec.codes)
    if not vocab:
        raise CohortValidationError("no labels found in the training split")
    return sorted(vocab)


def target_matrix(
    records: Sequence[AdmissionRecord],
    kept: Sequence[int],
    vocab_index: dict[str, int],
) -> np.ndarray:
    """Multi-hot next-admission targets for the kept context slices.

    Context slice at record index i is supervised with the codes of
    record i+1.
    """
    y = np.zeros((len(kept), len(vocab_index)))
    for row, idx in enumerate(kept):
        for code in records[idx + 1].codes:
            j = vocab_index.get(code)
            if j is not None:
                y[row, j] = 1.0
    return y


def patient_probabilities(
    records: Sequence[AdmissionRecord],
    params: ModelParams,
    encoder: TextEncoder,
    temperature: float,
    use_graph: bool = True,
) -> tuple[np.ndarray, list[int]]:
    """Evaluation-mode label probabilities for a patient's context slices
    (all admissions but the last)."""
    out = forward_trajectory(
        records[:-1], params, encoder, temperature, training=False, use_graph=use_graph
    )
    probs = predict_probs(out.pooled, params)
    return probs.data.copy(), out.kept


def validation_recall_at_k(
    patients: Sequence[Sequence[AdmissionRecord]],
    params: ModelParams,
    encoder: TextEncoder,
    temperature: float,
    vocab_index: dict[str, int],
    k: int = 20,
    use_graph: bool = True,
) -> float:
    """Mean Recall@k of final-admission predictions; patients whose final
    admission has no in-vocabulary codes are skipped."""
    recalls = []
    for records in patients:
        true = {vocab_index[c] for c in records[-1].codes if c in vocab_index}
        if not true:
            continue
        probs, _ = patient_probabilities(records, params, encoder, temperature, use_graph)
        _, r = precision_recall_at_k(probs[-1], true, k)
        recalls.append(r)
    if not recalls:
        raise CohortValidationError("no validation patient has in-vocabulary final codes")
    return float(np.mean(recalls))


@dataclass
class TrainResult:
    params: ModelParams
    label_vocab: list[str]
    history: list[dict]
    best_epoch: int
    best_temperature: float
    config: TrainConfig
    dims: ModelDims
    use_graph: bool = True
    adam_t: int = 0
    adam_arrays: dict = field(default_factory=dict)
    epochs_completed: int = 0


def train_model(
    train_patients: Sequence[Sequence[AdmissionRecord]],
    valid_patients: Sequence[Sequence[AdmissionRecord]],
    config: TrainConfig,
    dims: ModelDims,
    encoder: TextEncoder,
    use_graph: bool = True,
    history_path=None,
    start_epoch: int = 0,
    params: ModelParams | None = None,
    adam_state: tuple[int, dict] | None = None,
) -> TrainResult:
    """Adam training loop with per-epoch annealing and early stopping.

    start_epoch / params / adam_state support resuming from a checkpoint;
    epoch numbering (and therefore the temperature schedule) continues
    where it left off.
    """
    config.validate()
    dims.validate()
    if not train_patients:
        raise ConfigurationError("training split is empty")
    if not valid_patients:
        raise ConfigurationError("validation split is empty")
    vocab = build_label_vocab(train_patients)
    vocab_index = {c: i for i, c in enumerate(vocab)}
    if params is None:
        params = ModelParams(dims, len(vocab), np.random.default_rng([config.seed, 0]))
    adam = Adam(params.named(), config.learning_rate, config.weight_decay)
    if adam_state is not None:
        adam.load_state_arrays(adam_state[1], adam_state[0])

    history: list[dict] = []
    best_recall = -np.inf
    best_state = params.copy_arrays()
    best_epoch = start_epoch
    best_temperature = anneal_temperature(min(start_epoch, config.max_epochs - 1), config)
    stall = 0
    history_fh = open(history_path, "w", encoding="utf-8") if history_path else None
    try:
        for epoch in range(start_epoch, config.max_epochs):
            temperature = anneal_temperature(epoch, config)
            order = np.random.default_rng([config.seed, 1000 + epoch]).permutation(
                len(train_patients)
            )
            loss_sum = 0.0
            focal_sum = 0.0
            acyc_sum = 0.0
            l1_sum = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                adam.zero_grad()
                for pidx in batch:
                    records = train_patients[int(pidx)]
                    rng = np.random.default_rng([config.seed, epoch, int(pidx)])
                    out = forward_trajectory(
                        records[:-1], params, encoder, temperature,
                        training=True, rng=rng, dropout=config.dropout,
                        use_graph=use_graph,
                    )
                    probs = predict_probs(out.pooled, params)
                    targets = target_matrix(records, out.kept, vocab_index)
                    loss = total_loss(probs, targets, out.acyc, out.l1, config)
                    loss.backward()
                    loss_sum += loss.item()
                    focal_sum += loss.item() - (
                        config.lambda_acyc * out.acyc.item()
                        + config.lambda_l1 * out.l1.item()
                    )
                    acyc_sum += out.acyc.item()
                    l1_sum += out.l1.item()
                adam.step()
            val_recall = validation_recall_at_k(
                valid_patients, params, encoder, temperature, vocab_index,
                k=20, use_graph=use_graph,
            )
            record = {
                "epoch": epoch,
                "temperature": temperature,
                "train_loss": loss_sum,
                "train_focal": focal_sum,
                "train_acyc": acyc_sum,
                "train_l1": l1_sum,
                "val_recall20": val_recall,
            }
            history.append(record)
            if history_fh:
                history_fh.write(json.dumps(record, sort_keys=True) + "\n")
                history_fh.flush()
            logger.info(
                "epoch %d: loss %.4f, acyc %.4f, val recall@20 %.4f",
                epoch, loss_sum, acyc_sum, val_recall,
            )
            if val_recall > best_recall:
                best_recall = val_recall
                best_state = params.copy_arrays()
                best_epoch = epoch
                best_temperature = temperature
                stall = 0
            else:
                stall += 1
                if stall >= config.patience:
                    logger.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
                    break
    finally:
        if history_fh:
            history_fh.close()
    params.load_arrays(best_state)
    return TrainResult(
        params=params,
        label_vocab=vocab,
        history=history,
        best_epoch=best_epoch,
        best_temperature=best_temperature,
        config=config,
        dims=dims,
        use_graph=use_graph,
        adam_t=adam.t,
        adam_arrays=adam.state_arrays(),
        epochs_completed=history[-1]["epoch"] + 1 if history else start_epoch,
    )
