import math
import struct
from pathlib import Path

import numpy as np
import pytest

from py_rce_detect.checkpoint import (
    MAGIC,
    decode_tensors,
    encode_tensors,
    load_detector,
    load_model,
    save_detector,
    save_model,
    sidecar_path,
)
from py_rce_detect.classifier import infer
from py_rce_detect.datasets import Dataset
from py_rce_detect.detectors import DetectorState, Metric, metric_scores
from py_rce_detect.exception import DataFormatError
from py_rce_detect.network import NetworkModel, Objective


class TestTensorFile:
    """Magic, version, then named float64 tensors."""

    def test_layout(self) -> None:
        blob = encode_tensors({"w": np.array([1.0, 2.0])})
        assert blob[:4] == MAGIC
        assert struct.unpack("<3I", blob[4:16]) == (1, 1, 1)
        assert len(blob) == 4 + 4 + 4 + 4 + 1 + 4 + 4 + 16

    def test_decode(self) -> None:
        tensors = {"a/b": np.arange(6.0).reshape(2, 3), "scalar": np.array(3.5)}
        decoded = decode_tensors(encode_tensors(tensors))
        assert list(decoded) == ["a/b", "scalar"]
        np.testing.assert_array_equal(decoded["a/b"], tensors["a/b"])
        assert decoded["scalar"].shape == ()

    def test_bad_magic(self) -> None:
        with pytest.raises(DataFormatError, match="magic") as info:
            decode_tensors(b"NOPE" + bytes(8))
        assert info.value.offset == 0

    def test_unknown_version(self) -> None:
        with pytest.raises(DataFormatError, match="version"):
            decode_tensors(MAGIC + struct.pack("<2I", 9, 0))

    def test_truncated(self) -> None:
        blob = encode_tensors({"w": np.ones(4)})
        with pytest.raises(DataFormatError, match="Truncated"):
            decode_tensors(blob[:-1])

    def test_name_not_utf8(self) -> None:
        blob = MAGIC + struct.pack("<3I", 1, 1, 1) + b"\xff" + struct.pack("<I", 0) + bytes(8)
        with pytest.raises(DataFormatError, match="UTF-8") as info:
            decode_tensors(blob)
        assert info.value.offset == 16

    def test_trailing_bytes(self) -> None:
        blob = encode_tensors({"w": np.ones(4)})
        with pytest.raises(DataFormatError, match="Trailing") as info:
            decode_tensors(blob + b"\x00")
        assert info.value.offset == len(blob)


class TestModelCheckpoint:
    def test_round_trip(self, tmp_path: Path, rce_model: NetworkModel, blobs: Dataset) -> None:
        path = tmp_path / "model.rce"
        save_model(rce_model, path)
        assert sidecar_path(path).exists()
        restored = load_model(path)
        assert restored.objective is Objective.RCE
        assert restored.architecture.name == rce_model.architecture.name
        assert restored.train_steps == rce_model.train_steps
        np.testing.assert_array_equal(infer(restored, blobs.images).logits, infer(rce_model, blobs.images).logits)

    def test_saving_is_deterministic(self, tmp_path: Path, ce_model: NetworkModel) -> None:
        save_model(ce_model, tmp_path / "one.rce")
        save_model(ce_model, tmp_path / "two.rce")
        assert (tmp_path / "one.rce").read_bytes() == (tmp_path / "two.rce").read_bytes()
        assert (tmp_path / "one.json").read_bytes() == (tmp_path / "two.json").read_bytes()


class TestDetectorCheckpoint:
    def test_kdensity_round_trip(
        self, tmp_path: Path, ce_detector: DetectorState, ce_model: NetworkModel, blobs: Dataset
    ) -> None:
        path = tmp_path / "detector.rce"
        save_detector(ce_detector, path)
        restored = load_detector(path)
        assert restored.threshold == ce_detector.threshold
        assert restored.eta == ce_detector.eta
        assert restored.sigma2 == ce_detector.sigma2
        assert sorted(restored.banks) == sorted(ce_detector.banks)
        np.testing.assert_array_equal(
            metric_scores(restored, ce_model, blobs.images), metric_scores(ce_detector, ce_model, blobs.images)
        )

    def test_uncalibrated_confidence(self, tmp_path: Path) -> None:
        path = tmp_path / "detector.rce"
        save_detector(DetectorState(Metric.CONFIDENCE), path)
        restored = load_detector(path)
        assert restored.metric is Metric.CONFIDENCE
        assert restored.threshold == -math.inf
        assert restored.banks == {}
        assert restored.eta is None
