"""Binary tensor container and the JSON sidecars that describe models and detectors.

Layout (little-endian): b"RCE1", u32 version, u32 tensor count, then per tensor
u32 name length, UTF-8 name, u32 rank, rank × u32 extents, float64 data in row-major order.
"""

import json
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Final

import numpy as np

from py_rce_detect.detectors import DetectorState, Metric
from py_rce_detect.exception import DataFormatError
from py_rce_detect.factories import create_architecture
from py_rce_detect.network import NetworkModel, Objective
from py_rce_detect.tensor import Array

MAGIC: Final = b"RCE1"
FORMAT_VERSION: Final = 1

_U32 = struct.Struct("<I")


def encode_tensors(tensors: Mapping[str, Array]) -> bytes:
    chunks = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(tensors))]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(array.ndim))
        chunks.extend(_U32.pack(extent) for extent in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_tensors(blob: bytes) -> dict[str, Array]:
    offset = 0

    def _take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(blob):
            raise DataFormatError("Truncated tensor file", offset)
        chunk = blob[offset : offset + size]
        offset += size
        return chunk

    def _u32() -> int:
        value: int = _U32.unpack(_take(4))[0]
        return value

    if _take(4) != MAGIC:
        raise DataFormatError("Bad magic bytes", 0)
    version = _u32()
    if version != FORMAT_VERSION:
        raise DataFormatError(f"Unsupported format version {version}", 4)
    tensors: dict[str, Array] = {}
    for _ in range(_u32()):
        name_offset = offset + 4
        raw_name = _take(_u32())
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError:
            raise DataFormatError("Tensor name is not valid UTF-8", name_offset) from None
        shape = tuple(_u32() for _ in range(_u32()))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(_take(8 * count), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    if offset != len(blob):
        raise DataFormatError("Trailing bytes after last tensor", offset)
    return tensors


def write_tensors(path: Path, tensors: Mapping[str, Array]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))


def read_tensors(path: Path) -> dict[str, Array]:
    return decode_tensors(path.read_bytes())


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _write_json(path: Path, payload: Mapping[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ============================================================================
# Models
# ============================================================================


def save_model(model: NetworkModel, path: Path) -> None:
    write_tensors(path, {name: param.data for name, param in model.params.items()})
    _write_json(
        sidecar_path(path),
        {
            "objective": model.objective.value,
            "architecture": model.architecture.name,
            "num_classes": model.num_classes,
            "input_shape": list(model.input_shape),
            "leak": model.leak,
            "seed": model.seed,
            "train_steps": model.train_steps,
        },
    )


def load_model(path: Path) -> NetworkModel:
    meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    channels, height, width = (int(v) for v in meta["input_shape"])
    model = NetworkModel(
        create_architecture(meta["architecture"]),
        (channels, height, width),
        int(meta["num_classes"]),
        Objective(meta["objective"]),
        leak=float(meta["leak"]),
        seed=int(meta["seed"]),
    )
    model.load_params(read_tensors(path))
    model.train_steps = int(meta["train_steps"])
    return model


# ============================================================================
# Detectors
# ============================================================================


def save_detector(state: DetectorState, path: Path) -> None:
    write_tensors(path, {f"bank/{label}": bank for label, bank in sorted(state.banks.items())})
    _write_json(
        sidecar_path(path),
        {
            "metric": state.metric.value,
            "sigma2": state.sigma2,
            "threshold": state.threshold,
            "percentile": state.percentile,
            "eta": state.eta,
            "class_counts": {str(label): int(bank.shape[0]) for label, bank in sorted(state.banks.items())},
        },
    )


def load_detector(path: Path) -> DetectorState:
    meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    banks = {int(name.split("/", 1)[1]): array for name, array in read_tensors(path).items()}
    return DetectorState(
        metric=Metric(meta["metric"]),
        banks=banks,
        sigma2=float(meta["sigma2"]),
        threshold=float(meta["threshold"]),
        percentile=None if meta["percentile"] is None else float(meta["percentile"]),
        eta=None if meta["eta"] is None else float(meta["eta"]),
    )
