"""Next-admission diagnosis-code forecasting over learned temporal causal graphs.

The pipeline: rule-based clinical note distillation into proposition nodes,
hashing (or file-backed) text embeddings, per-admission causal graph sampling
with Gumbel-Softmax and an acyclicity penalty, graph convolution with
inter-admission message passing, multi-label prediction with focal loss, and
split conformal prediction sets with finite-sample coverage.
"""
from .autodiff import ShapeError, Tensor, gradient_check
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .conformal import (
    ConformalSetPredictor,
    PredictionSet,
    calibrate_threshold,
    conformal_metrics,
    nonconformity,
    prediction_set_indices,
)
from .encoding import (
    FileBackedEncoder,
    HashingTextEncoder,
    TextEncoder,
    assemble_features,
    write_embedding_file,
)
from .errors import (
    CalibrationError,
    CodecastError,
    CohortValidationError,
    ConfigurationError,
    DataFormatError,
    DegenerateSliceError,
    EmptyInputError,
    MetricError,
    TrajectoryError,
)
from .graph import (
    CausalGraphSample,
    acyclicity_penalty,
    export_graph,
    export_trajectory,
    forward_trajectory,
    gumbel_softmax,
    write_graph_export,
)
from .ingestion import (
    AdmissionRecord,
    HeadingSet,
    KeywordLexicon,
    RemoteExtractor,
    RuleBasedExtractor,
    Stage1Pipeline,
    canonical_icd9,
    load_cohort,
    load_icd_map,
    save_cohort,
    segment_note,
)
from .metrics import MetricReport, auroc, precision_recall_at_k, report_from_scores
from .model import GraphCodePredictor, evaluate_split
from .params import ModelDims, ModelParams
from .synthetic import (
    GeneratorConfig,
    GroundTruth,
    generate_cohort,
    random_recovery_baseline,
    structure_recovery_score,
    write_icd_map,
)
from .training import Adam, TrainConfig, TrainResult, split_cohort, train_model

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdmissionRecord",
    "CalibrationError",
    "CausalGraphSample",
    "Checkpoint",
    "CodecastError",
    "CohortValidationError",
    "ConfigurationError",
    "ConformalSetPredictor",
    "DataFormatError",
    "DegenerateSliceError",
    "EmptyInputError",
    "FileBackedEncoder",
    "GeneratorConfig",
    "GraphCodePredictor",
    "GroundTruth",
    "HashingTextEncoder",
    "HeadingSet",
    "KeywordLexicon",
    "MetricError",
    "MetricReport",
    "ModelDims",
    "ModelParams",
    "PredictionSet",
    "RemoteExtractor",
    "RuleBasedExtractor",
    "ShapeError",
    "Stage1Pipeline",
    "Tensor",
    "TextEncoder",
    "TrainConfig",
    "TrainResult",
    "TrajectoryError",
    "acyclicity_penalty",
    "assemble_features",
    "auroc",
    "calibrate_threshold",
    "canonical_icd9",
    "conformal_metrics",
    "evaluate_split",
    "export_graph",
    "export_trajectory",
    "forward_trajectory",
    "generate_cohort",
    "gradient_check",
    "gumbel_softmax",
    "load_cohort",
    "load_checkpoint",
    "load_icd_map",
    "nonconformity",
    "precision_recall_at_k",
    "prediction_set_indices",
    "random_recovery_baseline",
    "report_from_scores",
    "save_checkpoint",
    "save_cohort",
    "segment_note",
    "split_cohort",
    "structure_recovery_score",
    "train_model",
    "write_embedding_file",
    "write_graph_export",
    "write_icd_map",
]
