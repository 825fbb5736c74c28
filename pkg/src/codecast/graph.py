"""Stage 3: differentiable causal-graph sampling and message passing.

Edge logits are input-dependent bilinear scores over projected node
features. Blocks are sampled with row-wise Gumbel-Softmax, assembled into
the block intra-slice adjacency (code rows never point at proposition
rows), pushed through the within-slice and between-slice convolutions,
and pooled into one embedding per admission.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .encoding import SliceFeatures, TextEncoder, assemble_features
from .errors import DegenerateSliceError, TrajectoryError
from .ingestion import AdmissionRecord

logger = logging.getLogger(__name__)

DIAG_MASK = -1e9

EDGE_TYPES = ("PP", "PC", "CC", "inter")


def edge_logits(
    src: ad.Tensor,
    dst: ad.Tensor,
    form: ad.Tensor,
    mask_diagonal: bool = False,
) -> ad.Tensor:
    """Bilinear scores logits[i][j] = src_i . form . dst_j.

    With mask_diagonal, self-loop logits are pushed to -1e9 (requires a
    square result).
    """
    logits = ad.matmul(ad.matmul(src, form), ad.transpose(dst))
    if mask_diagonal:
        if logits.rows != logits.cols:
            raise ad.ShapeError(f"diagonal mask needs a square matrix, got {logits.shape}")
        mask = np.zeros(logits.shape)
        np.fill_diagonal(mask, DIAG_MASK)
        logits = ad.add(logits, ad.constant(mask))
    return logits


def gumbel_softmax(
    logits: ad.Tensor,
    temperature: float,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> ad.Tensor:
    """Row-wise softmax of (logits + G) / temperature.

    G is i.i.d. standard Gumbel noise in training mode and zero in
    evaluation mode.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if training:
        if rng is None:
            raise ValueError("training-mode sampling needs an rng")
        noise = rng.gumbel(size=logits.shape)
        logits = ad.add(logits, ad.constant(noise))
    return ad.softmax_rows(ad.scale(logits, 1.0 / temperature))


def build_intra_adjacency(
    s_pp: ad.Tensor | None,
    s_pc: ad.Tensor | None,
    s_cc: ad.Tensor | None,
    n_props: int,
    n_codes: int,
) -> ad.Tensor:
    """Assemble [[S_PP, S_PC], [0, S_CC]]; the code-to-proposition block is
    structurally zero."""
    def check(block, rows, cols, name):
        if block.shape != (rows, cols):
            raise ad.ShapeError(f"{name}: expected {(rows, cols)}, got {block.shape}")

    if n_props > 0 and n_codes > 0:
        check(s_pp, n_props, n_props, "S_PP")
        check(s_pc, n_props, n_codes, "S_PC")
        check(s_cc, n_codes, n_codes, "S_CC")
        top = ad.concat_cols([s_pp, s_pc])
        bottom = ad.concat_cols([ad.constant(np.zeros((n_codes, n_props))), s_cc])
        return ad.concat_rows([top, bottom])
    if n_props > 0:
        check(s_pp, n_props, n_props, "S_PP")
        return s_pp
    check(s_cc, n_codes, n_codes, "S_CC")
    return s_cc


def acyclicity_penalty(adjacency: ad.Tensor) -> ad.Tensor:
    """tr(exp(A o A)) - n; zero exactly when A's support is acyclic."""
    return ad.trace_expm_hadamard(adjacency)


def gc_intra(adjacency: ad.Tensor, x: ad.Tensor, w1: ad.Tensor) -> ad.Tensor:
    """Within-slice convolution ReLU(A X W1) + X."""
    return ad.add(ad.relu(ad.matmul(ad.matmul(adjacency, x), w1)), x)


def gc_inter(s_inter: ad.Tensor, x_tilde: ad.Tensor, w2: ad.Tensor, x_next: ad.Tensor) -> ad.Tensor:
    """Between-slice convolution S_inter X~_t W2 + X_{t+1}.

    S_inter is (ND_{t+1} x ND_t): each target row is a soft selection over
    the previous slice's nodes. The residual is the target slice's own
    features.
    """
    return ad.add(ad.matmul(ad.matmul(s_inter, x_tilde), w2), x_next)


def pool_slice(x_tilde: ad.Tensor, n_props: int, n_codes: int, params) -> ad.Tensor:
    """MLP over [mean of proposition rows ; mean of code rows] -> (1, k).

    An empty partition contributes zeros.
    """
    proj_dim = x_tilde.cols
    if n_props > 0:
        mean_p = ad.row_mean(ad.slice_rows(x_tilde, 0, n_props))
    else:
        mean_p = ad.constant(np.zeros((1, proj_dim)))
    if n_codes > 0:
        mean_c = ad.row_mean(ad.slice_rows(x_tilde, n_props, n_props + n_codes))
    else:
        mean_c = ad.constant(np.zeros((1, proj_dim)))
    h = ad.relu(ad.add_rowvec(ad.matmul(ad.concat_cols([mean_p, mean_c]), params.pool_w1),
                              params.pool_b1))
    return ad.add_rowvec(ad.matmul(h, params.pool_w2), params.pool_b2)


@dataclass
class CausalGraphSample:
    """Sampled soft adjacencies for one slice, detached from the graph.

    s_inter connects this slice to the next one, (ND_{t+1} x ND_t); None
    for the final slice. Labels are proposition texts and code
    descriptions, in node order.
    """

    s_pp: np.ndarray | None
    s_pc: np.ndarray | None
    s_cc: np.ndarray | None
    adjacency: np.ndarray
    s_inter: np.ndarray | None
    prop_labels: list[str]
    code_labels: list[str]

    @property
    def node_labels(self) -> list[str]:
        return self.prop_labels + self.code_labels


@dataclass
class TrajectoryOutput:
    """Forward-pass products for one patient trajectory."""

    pooled: ad.Tensor
    acyc: ad.Tensor
    l1: ad.Tensor
    samples: list[CausalGraphSample]
    kept: list[int]


def _sample_intra(
    feats: SliceFeatures,
    params,
    temperature: float,
    rng: np.random.Generator | None,
    training: bool,
):
    n_p, n_c = feats.n_props, feats.n_codes
    props = feats.prop_block() if n_p else None
    codes = feats.code_block() if n_c else None
    s_pp = s_pc = s_cc = None
    if n_p:
        s_pp = gumbel_softmax(
            edge_logits(props, props, params.edge_pp, mask_diagonal=True),
            temperature, rng, training,
        )
    if n_p and n_c:
        s_pc = gumbel_softmax(
            edge_logits(props, codes, params.edge_pc), temperature, rng, training
        )
    if n_c:
        s_cc = gumbel_softmax(
            edge_logits(codes, codes, params.edge_cc, mask_diagonal=True),
            temperature, rng, training,
        )
    return s_pp, s_pc, s_cc


def forward_trajectory(
    records: Sequence[AdmissionRecord],
    params,
    encoder: TextEncoder,
    temperature: float,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.1,
    use_graph: bool = True,
) -> TrajectoryOutput:
    """Run Stages 2-3 over a patient's admissions.

    Degenerate admissions (no nodes) are skipped with a warning; their
    indices are absent from the returned kept list. With use_graph False,
    sampling and both convolutions are bypassed and slices are pooled
    directly (the graph-ablation variant).
    """
    slices: list[tuple[int, SliceFeatures]] = []
    for idx, record in enumerate(records):
        try:
            feats = assemble_features(record, encoder, params, training, rng, dropout)
        except DegenerateSliceError:
            logger.warning(
                "skipping admission %r@%r: no proposition or code nodes",
                record.patient_id, record.timestamp,
            )
            continue
        slices.append((idx, feats))
    if not slices:
        raise TrajectoryError("every admission in the trajectory is degenerate")

    acyc = ad.constant(np.zeros((1, 1)))
    l1 = ad.constant(np.zeros((1, 1)))
    pooled_rows: list[ad.Tensor] = []
    samples: list[CausalGraphSample] = []
    message: ad.Tensor | None = None

    for pos, (idx, feats) in enumerate(slices):
        current = feats.x if message is None else ad.add(feats.x, message)
        record = records[idx]
        if use_graph:
            s_pp, s_pc, s_cc = _sample_intra(feats, params, temperature, rng, training)
            adjacency = build_intra_adjacency(s_pp, s_pc, s_cc, feats.n_props, feats.n_codes)
            acyc = ad.add(acyc, acyclicity_penalty(adjacency))
            for block in (s_pp, s_pc, s_cc):
                if block is not None and block.cols > 0:
                    l1 = ad.add(l1, ad.abs_sum(block))
            x_tilde = gc_intra(adjacency, current, params.mix_intra)
        else:
            adjacency = np.zeros((feats.n_nodes, feats.n_nodes))
            s_pp = s_pc = s_cc = None
            x_tilde = current

        pooled_rows.append(pool_slice(x_tilde, feats.n_props, feats.n_codes, params))

        s_inter_arr = None
        message = None
        if pos + 1 < len(slices) and use_graph:
            next_feats = slices[pos + 1][1]
            inter_logits = edge_logits(next_feats.x, feats.x, params.edge_inter)
            s_inter = gumbel_softmax(inter_logits, temperature, rng, training)
            l1 = ad.add(l1, ad.abs_sum(s_inter))
            message = ad.matmul(ad.matmul(s_inter, x_tilde), params.mix_inter)
            s_inter_arr = s_inter.data.copy()

        samples.append(
            CausalGraphSample(
                s_pp=None if s_pp is None else s_pp.data.copy(),
                s_pc=None if s_pc is None else s_pc.data.copy(),
                s_cc=None if s_cc is None else s_cc.data.copy(),
                adjacency=adjacency.data.copy() if isinstance(adjacency, ad.Tensor) else adjacency,
                s_inter=s_inter_arr,
                prop_labels=list(record.propositions),
                code_labels=list(record.code_descriptions),
            )
        )

    pooled = pooled_rows[0] if len(pooled_rows) == 1 else ad.concat_rows(pooled_rows)
    return TrajectoryOutput(pooled=pooled, acyc=acyc, l1=l1, samples=samples,
                            kept=[idx for idx, _ in slices])


class Edge(NamedTuple):
    edge_type: str
    src_label: str
    dst_label: str
    weight: float


def export_graph(
    sample: CausalGraphSample,
    node_labels: Sequence[str] | None = None,
    threshold: float = 0.5,
    next_labels: Sequence[str] | None = None,
) -> list[Edge]:
    """Edges with weight >= threshold, tagged by block.

    node_labels defaults to the sample's own labels. Inter edges need the
    next slice's labels; they are omitted when next_labels is None.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    labels = list(node_labels) if node_labels is not None else sample.node_labels
    props = sample.prop_labels
    codes = sample.code_labels
    edges: list[Edge] = []

    def emit(matrix, kind, src_names, dst_names):
        if matrix is None:
            return
        rows, cols = matrix.shape
        for i in range(rows):
            for j in range(cols):
                if kind in ("PP", "CC") and i == j:
                    continue
                w = float(matrix[i, j])
                if w >= threshold:
                    edges.append(Edge(kind, src_names[i], dst_names[j], w))

    emit(sample.s_pp, "PP", props, props)
    emit(sample.s_pc, "PC", props, codes)
    emit(sample.s_cc, "CC", codes, codes)
    if sample.s_inter is not None and next_labels is not None:
        # rows are next-slice targets, columns are this slice's sources
        rows, cols = sample.s_inter.shape
        for i in range(rows):
            for j in range(cols):
                w = float(sample.s_inter[i, j])
                if w >= threshold:
                    edges.append(Edge("inter", labels[j], list(next_labels)[i], w))
    return edges


def export_trajectory(
    samples: Sequence[CausalGraphSample],
    threshold: float = 0.5,
) -> list[tuple[int, Edge]]:
    """(slice index, edge) pairs for a whole trajectory, inter edges
    resolved against the following slice's labels."""
    out: list[tuple[int, Edge]] = []
    for t, sample in enumerate(samples):
        next_labels = samples[t + 1].node_labels if t + 1 < len(samples) else None
        for edge in export_graph(sample, None, threshold, next_labels):
            out.append((t, edge))
    return out


def write_graph_export(
    rows: Sequence[tuple[str, Edge]],
    csv_path,
    manifest_path,
    threshold: float,
    temperature: float,
    seed: int,
) -> None:
    """Write the edge CSV (slice,edge_type,src_label,dst_label,weight) and
    its JSON manifest."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slice", "edge_type", "src_label", "dst_label", "weight"])
        for slice_id, edge in rows:
            writer.writerow(
                [slice_id, edge.edge_type, edge.src_label, edge.dst_label, repr(edge.weight)]
            )
    manifest = {
        "threshold": threshold,
        "temperature": temperature,
        "seed": seed,
        "n_edges": len(rows),
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
