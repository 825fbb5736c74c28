"""Stage 2: text encoding and per-admission feature assembly.

Propositions and code descriptions are embedded by a text encoder, passed
through modality-specific projections, and stacked into one node-feature
matrix per admission with propositions first, codes after.
"""
from __future__ import annotations

import csv
import hashlib
import re
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DegenerateSliceError, EmptyInputError
from .ingestion import AdmissionRecord

DEFAULT_EMBED_DIM = 768

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class TextEncoder(Protocol):
    """Deterministic map from text to a fixed-width embedding."""

    dimension: int

    def encode(self, text: str) -> np.ndarray: ...


def _stable_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "big")


def text_key(text: str) -> str:
    """Stable hex key for a text, used by file-backed embedding tables."""
    return hashlib.blake2b(text.encode("utf-8"), digest_size=16).hexdigest()


class HashingTextEncoder:
    """Feature-hashing encoder over lowercase word unigrams and bigrams.

    Buckets and signs come from blake2b digests, so embeddings are stable
    across processes and platforms. Output is L2-normalized.
    """

    def __init__(self, dimension: int = DEFAULT_EMBED_DIM):
        if dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {dimension}")
        self.dimension = dimension
        self._cache: dict[str, np.ndarray] = {}

    def encode(self, text: str) -> np.ndarray:
        if not text:
            raise EmptyInputError("cannot encode empty text")
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        words = _TOKEN_RE.findall(text.lower())
        features = list(words)
        features.extend(f"{a} {b}" for a, b in zip(words, words[1:]))
        if not features:
            features = [text]
        vec = np.zeros(self.dimension)
        for feat in features:
            h = _stable_hash(feat)
            bucket = h % self.dimension
            sign = 1.0 if (h >> 40) & 1 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm > 0.0:
            vec /= norm
        else:
            vec[_stable_hash(text) % self.dimension] = 1.0
        self._cache[text] = vec
        return vec


class FileBackedEncoder:
    """Embedding lookup from a CSV table of text_key,v1,...,vd rows.

    Keys are blake2b hex digests of the exact text (see text_key). A lookup
    miss raises KeyError naming the missing key.
    """

    def __init__(self, path):
        self.path = str(path)
        self._table: dict[str, np.ndarray] = {}
        dim = None
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                if lineno == 1 and row[0].strip().lower() in ("key", "text_key"):
                    continue
                key, values = row[0].strip(), row[1:]
                if dim is None:
                    dim = len(values)
                    if dim < 1:
                        raise ValueError(f"{path}:{lineno}: row has no embedding values")
                elif len(values) != dim:
                    raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
                self._table[key] = np.array([float(v) for v in values])
        if dim is None:
            raise EmptyInputError(f"{path}: embedding table is empty")
        self.dimension = dim

    def encode(self, text: str) -> np.ndarray:
        key = text_key(text)
        try:
            return self._table[key]
        except KeyError:
            raise KeyError(
                f"no embedding for key {key} (text {text[:40]!r}...) in {self.path}"
            ) from None


def write_embedding_file(texts: Sequence[str], vectors: np.ndarray, path) -> None:
    """Write a FileBackedEncoder-compatible CSV for the given texts."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != len(texts):
        raise ValueError("vectors must be a (len(texts), d) array")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for text, vec in zip(texts, vectors):
            writer.writerow([text_key(text)] + [repr(float(v)) for v in vec])


class SliceFeatures:
    """Projected node features for one admission.

    X has one row per node: n_props proposition rows first, then n_codes
    code rows.
    """

    def __init__(self, x: ad.Tensor, n_props: int, n_codes: int):
        if x.rows != n_props + n_codes:
            raise ad.ShapeError(
                f"feature matrix has {x.rows} rows but {n_props}+{n_codes} nodes"
            )
        self.x = x
        self.n_props = n_props
        self.n_codes = n_codes

    @property
    def n_nodes(self) -> int:
        return self.n_props + self.n_codes

    def prop_block(self) -> ad.Tensor:
        return ad.slice_rows(self.x, 0, self.n_props)

    def code_block(self) -> ad.Tensor:
        return ad.slice_rows(self.x, self.n_props, self.n_nodes)


def _project(
    raw: np.ndarray,
    weight: ad.Tensor,
    bias: ad.Tensor,
    training: bool,
    dropout: float,
    rng: np.random.Generator | None,
) -> ad.Tensor:
    h = ad.relu(ad.add_rowvec(ad.matmul(ad.constant(raw), weight), bias))
    if training and dropout > 0.0:
        if rng is None:
            raise ValueError("training-mode projection needs an rng for dropout")
        keep = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
        h = ad.hadamard(h, ad.constant(keep))
    return h


def assemble_features(
    record: AdmissionRecord,
    encoder: TextEncoder,
    params,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.1,
) -> SliceFeatures:
    """Encode and project one admission's propositions and codes.

    Raises DegenerateSliceError when the admission has neither propositions
    nor codes.
    """
    n_props, n_codes = record.n_props, record.n_codes
    if n_props == 0 and n_codes == 0:
        raise DegenerateSliceError(
            f"admission {record.patient_id!r}@{record.timestamp!r} has no nodes"
        )
    blocks = []
    if n_props:
        raw = np.stack([encoder.encode(p) for p in record.propositions])
        blocks.append(_project(raw, params.proj_prop_w, params.proj_prop_b,
                               training, dropout, rng))
    if n_codes:
        raw = np.stack([encoder.encode(d) for d in record.code_descriptions])
        blocks.append(_project(raw, params.proj_code_w, params.proj_code_b,
                               training, dropout, rng))
    x = blocks[0] if len(blocks) == 1 else ad.concat_rows(blocks)
    return SliceFeatures(x, n_props, n_codes)
