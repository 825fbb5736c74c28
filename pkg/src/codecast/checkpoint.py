"""Versioned binary checkpoint format.

Layout: 4-byte magic "CGCK", uint32 format version, uint64 header length,
a UTF-8 JSON header with sorted keys, then the raw float64 little-endian
buffers of every array in the header's listed order. The format contains
no timestamps, so identical state serializes to identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataFormatError
from .params import ModelDims, ModelParams
from .training import TrainConfig, TrainResult

MAGIC = b"CGCK"
FORMAT_VERSION = 1


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, result: TrainResult, include_optimizer: bool = True) -> None:
    """Serialize a training result; round-trips bit-exactly."""
    arrays: list[tuple[str, np.ndarray]] = list(result.params.copy_arrays().items())
    if include_optimizer:
        arrays.extend(sorted(result.adam_arrays.items()))
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(result.config),
        "dims": asdict(result.dims),
        "label_vocab": result.label_vocab,
        "best_epoch": result.best_epoch,
        "temperature": result.best_temperature,
        "use_graph": result.use_graph,
        "epochs_completed": result.epochs_completed,
        "adam_t": result.adam_t if include_optimizer else 0,
        "arrays": [
            {"name": name, "rows": arr.shape[0], "cols": arr.shape[1]}
            for name, arr in arrays
        ],
    }
    blob = _header_bytes(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    """Deserialized checkpoint contents."""

    config: TrainConfig
    dims: ModelDims
    label_vocab: list[str]
    best_epoch: int
    temperature: float
    use_graph: bool
    epochs_completed: int
    adam_t: int
    param_arrays: dict[str, np.ndarray] = field(default_factory=dict)
    adam_arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def restore_params(self) -> ModelParams:
        params = ModelParams(self.dims, len(self.label_vocab), np.random.default_rng(0))
        params.load_arrays(self.param_arrays)
        return params


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, not a checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise DataFormatError(f"{path}: unsupported format version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: corrupt header: {exc}") from exc
        param_arrays: dict[str, np.ndarray] = {}
        adam_arrays: dict[str, np.ndarray] = {}
        for meta in header["arrays"]:
            rows, cols = int(meta["rows"]), int(meta["cols"])
            raw = fh.read(rows * cols * 8)
            if len(raw) != rows * cols * 8:
                raise DataFormatError(f"{path}: truncated array {meta['name']!r}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
            name = meta["name"]
            if name.startswith("adam_"):
                adam_arrays[name] = arr
            else:
                param_arrays[name] = arr
    missing = [n for n in ModelParams.FIELDS if n not in param_arrays]
    if missing:
        raise DataFormatError(f"{path}: checkpoint missing arrays {missing}")
    return Checkpoint(
        config=TrainConfig(**header["config"]),
        dims=ModelDims(**header["dims"]),
        label_vocab=list(header["label_vocab"]),
        best_epoch=int(header["best_epoch"]),
        temperature=float(header["temperature"]),
        use_graph=bool(header.get("use_graph", True)),
        epochs_completed=int(header.get("epochs_completed", 0)),
        adam_t=int(header.get("adam_t", 0)),
        param_arrays=param_arrays,
        adam_arrays=adam_arrays,
    )
