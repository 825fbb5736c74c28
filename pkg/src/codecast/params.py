"""Model parameter container and initialization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

# Gain of the near-identity initialization of the bilinear edge forms.
# Sized so projected-similarity logit gaps survive the Gumbel-Softmax
# temperature without saturating the row distributions at the start.
EDGE_FORM_GAIN = 4.0


@dataclass(frozen=True)
class ModelDims:
    """Widths of the model's learned maps."""

    embed_dim: int = 768
    proj_dim: int = 128
    pool_hidden: int = 128
    pooled_dim: int = 64

    def validate(self) -> None:
        for name in ("embed_dim", "proj_dim", "pool_hidden", "pooled_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


class ModelParams:
    """All learned tensors, shared across time steps.

    Projections map encoder output to proj_dim; the four edge forms score
    node pairs bilinearly; the two mixing maps drive the within-slice and
    between-slice convolutions; the pooling MLP compresses a slice to
    pooled_dim; the head maps pooled trajectories to label logits.
    """

    FIELDS = (
        "proj_prop_w", "proj_prop_b", "proj_code_w", "proj_code_b",
        "edge_pp", "edge_pc", "edge_cc", "edge_inter",
        "mix_intra", "mix_inter",
        "pool_w1", "pool_b1", "pool_w2", "pool_b2",
        "head_w", "head_b",
    )

    def __init__(self, dims: ModelDims, n_labels: int, rng: np.random.Generator):
        dims.validate()
        if n_labels < 1:
            raise ValueError(f"n_labels must be >= 1, got {n_labels}")
        self.dims = dims
        self.n_labels = n_labels
        d, p, h, k = dims.embed_dim, dims.proj_dim, dims.pool_hidden, dims.pooled_dim

        def init(rows, cols):
            return ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols)))

        def zeros(rows, cols):
            return ad.parameter(np.zeros((rows, cols)))

        def edge_form():
            # Similarity init: a near-identity bilinear form scores node pairs
            # by the dot product of their projected embeddings, so routing
            # starts from the encoder's semantic alignment instead of noise.
            scale = EDGE_FORM_GAIN * d / p
            return ad.parameter(
                scale * np.eye(p)
                + rng.normal(0.0, 0.01 / np.sqrt(p), size=(p, p))
            )

        self.proj_prop_w = init(d, p)
        self.proj_prop_b = zeros(1, p)
        # Tied at init (free to diverge in training) so cross-modality dot
        # products start out measuring text similarity.
        self.proj_code_w = ad.parameter(self.proj_prop_w.data.copy())
        self.proj_code_b = zeros(1, p)
        def mix_form():
            # Near-identity start keeps the convolutions feature-preserving,
            # so graph variants begin from the same signal the raw features
            # carry and training shapes the mixing instead of recovering it.
            return ad.parameter(
                np.eye(p) + rng.normal(0.0, 0.01 / np.sqrt(p), size=(p, p))
            )

        self.edge_pp = edge_form()
        self.edge_pc = edge_form()
        self.edge_cc = edge_form()
        # The temporal form starts near zero, so cross-admission attention
        # begins uniform: every node first sees a summary of the previous
        # slice, and training sharpens routing where one antecedent matters.
        self.edge_inter = ad.parameter(
            rng.normal(0.0, 0.01 / np.sqrt(p), size=(p, p))
        )
        self.mix_intra = mix_form()
        self.mix_inter = mix_form()
        self.pool_w1 = init(2 * p, h)
        self.pool_b1 = zeros(1, h)
        self.pool_w2 = init(h, k)
        self.pool_b2 = zeros(1, k)
        self.head_w = init(k, n_labels)
        self.head_b = zeros(1, n_labels)

    def named(self) -> dict[str, ad.Tensor]:
        """Name -> tensor in a fixed order."""
        return {name: getattr(self, name) for name in self.FIELDS}

    def tensors(self) -> list[ad.Tensor]:
        return [getattr(self, name) for name in self.FIELDS]

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name).data.copy() for name in self.FIELDS}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.FIELDS:
            tensor = getattr(self, name)
            arr = arrays[name]
            if arr.shape != tensor.shape:
                raise ad.ShapeError(f"{name}: expected {tensor.shape}, got {arr.shape}")
            tensor.data = arr.astype(np.float64).copy()
            tensor.grad = None
