"""Detection metrics (confidence, non-ME, K-density) and the NOT_SURE thresholding test."""

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass
from enum import StrEnum
from typing import Final, Literal

import numpy as np
import numpy.typing as npt
from scipy.spatial.distance import cdist
from scipy.special import entr, logsumexp

from py_rce_detect.classifier import ModelOutputs, infer
from py_rce_detect.datasets import Dataset
from py_rce_detect.exception import DetectorError, ShapeError
from py_rce_detect.network import NetworkModel, Objective
from py_rce_detect.tensor import Array

logger = logging.getLogger(__name__)

NON_MAX_MASS_FLOOR: Final = 1e-12
DEFAULT_PERCENTILE: Final = 5.0
CE_BANDWIDTH: Final = 1.0 / 0.26
RCE_BANDWIDTH: Final = 0.1 / 0.26
KD_FLOOR: Final = float(np.finfo(np.float64).tiny)


class Metric(StrEnum):
    CONFIDENCE = "confidence"
    NON_ME = "non_me"
    KDENSITY = "kdensity"


class Verdict(enum.Enum):
    NOT_SURE = "NOT_SURE"


NOT_SURE: Final = Verdict.NOT_SURE

type Decision = int | Literal[Verdict.NOT_SURE]


def default_bandwidth(objective: Objective) -> float:
    return RCE_BANDWIDTH if objective is Objective.RCE else CE_BANDWIDTH


@dataclass(frozen=True, slots=True)
class DetectorState:
    metric: Metric
    banks: dict[int, Array] = dataclasses.field(default_factory=dict)  # class id -> n×m hidden vectors
    sigma2: float = CE_BANDWIDTH
    threshold: float = -math.inf
    percentile: float | None = None
    eta: float | None = None

    def __post_init__(self) -> None:
        if not self.sigma2 > 0:
            msg = f"Bandwidth must be positive, got {self.sigma2}."
            raise ValueError(msg)
        if math.isnan(self.threshold):
            raise ValueError("Threshold must not be NaN.")
        for label, bank in self.banks.items():
            if bank.ndim != 2 or bank.shape[0] == 0:  # noqa: PLR2004
                msg = f"Bank for class {label} must be a nonempty n×m matrix, got {bank.shape}."
                raise DetectorError(msg, label)

    def with_threshold(self, threshold: float, percentile: float | None = None) -> "DetectorState":
        return dataclasses.replace(self, threshold=threshold, percentile=percentile)

    def with_eta(self, eta: float) -> "DetectorState":
        return dataclasses.replace(self, eta=eta)

    def bank(self, label: int) -> Array:
        if self.metric is not Metric.KDENSITY:
            msg = f"A {self.metric} detector holds no hidden-vector banks."
            raise DetectorError(msg)
        try:
            return self.banks[label]
        except KeyError:
            msg = f"Detector is not fitted for class {label}."
            raise DetectorError(msg, label) from None


# ============================================================================
# Metrics on probability vectors
# ============================================================================


def confidence_metric(probs: npt.ArrayLike) -> float:
    return float(np.max(np.asarray(probs, dtype=np.float64)))


def non_me_metric(probs: npt.ArrayLike) -> float:
    """Entropy of the normalized non-maximal elements of `probs`."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:  # noqa: PLR2004
        msg = f"non-ME needs a probability vector with at least two entries, got shape {p.shape}."
        raise ShapeError(msg)
    rest = np.delete(p, int(np.argmax(p)))
    mass = rest.sum()
    if mass < NON_MAX_MASS_FLOOR:
        return 0.0
    return float(entr(rest / mass).sum())


def confidence_scores(probs: Array) -> Array:
    return probs.max(axis=1)


def non_me_scores(probs: Array) -> Array:
    return np.array([non_me_metric(row) for row in probs], dtype=np.float64)


# ============================================================================
# K-density
# ============================================================================


def kdensity_fit(
    model: NetworkModel,
    dataset: Dataset,
    sigma2: float,
    *,
    max_bank_size: int | None = None,
    seed: int = 0,
) -> DetectorState:
    """Group the final hidden vectors of `dataset` by true label into per-class banks."""
    hidden = infer(model, dataset.images).hidden
    rng = np.random.default_rng(seed)
    banks: dict[int, Array] = {}
    for label in range(model.num_classes):
        rows = hidden[dataset.labels == label]
        if rows.shape[0] == 0:
            msg = f"Class {label} has no training points."
            raise DetectorError(msg, label)
        if max_bank_size is not None and rows.shape[0] > max_bank_size:
            keep = np.sort(rng.choice(rows.shape[0], size=max_bank_size, replace=False))
            rows = rows[keep]
        banks[label] = rows.copy()
    logger.info("Fitted K-density banks: %s", {label: bank.shape[0] for label, bank in banks.items()})
    return DetectorState(Metric.KDENSITY, banks, sigma2)


def kdensity_log_scores(state: DetectorState, hidden: Array, predicted: npt.NDArray[np.int64]) -> Array:
    """log KD for each row of `hidden`, against the bank of its predicted class."""
    out = np.empty(hidden.shape[0])
    for label in np.unique(predicted):
        mask = predicted == label
        bank = state.bank(int(label))
        exponents = -cdist(hidden[mask], bank, "sqeuclidean") / state.sigma2
        out[mask] = logsumexp(exponents, axis=1) - math.log(bank.shape[0])
    return out


def kdensity_scores(state: DetectorState, hidden: Array, predicted: npt.NDArray[np.int64]) -> Array:
    """KD in (0, 1]; far points sit at the smallest normal float instead of underflowing to zero."""
    return np.maximum(np.exp(kdensity_log_scores(state, hidden, predicted)), KD_FLOOR)


def kdensity_score(state: DetectorState, model: NetworkModel, x: Array) -> float:
    outputs = infer(model, x[np.newaxis])
    return float(kdensity_scores(state, outputs.hidden, outputs.labels)[0])


def kdensity_eta(state: DetectorState, model: NetworkModel, dataset: Dataset) -> float:
    """Median of -log KD over `dataset`."""
    outputs = infer(model, dataset.images)
    return float(np.median(-kdensity_log_scores(state, outputs.hidden, outputs.labels)))


# ============================================================================
# Thresholding
# ============================================================================


def scores_from_outputs(state: DetectorState, outputs: ModelOutputs) -> Array:
    """Scores the threshold is compared against. K-density is scored as log KD, which never underflows."""
    match state.metric:
        case Metric.CONFIDENCE:
            return confidence_scores(outputs.probs)
        case Metric.NON_ME:
            return non_me_scores(outputs.probs)
        case Metric.KDENSITY:
            return kdensity_log_scores(state, outputs.hidden, outputs.labels)


def metric_scores(state: DetectorState, model: NetworkModel, images: Array) -> Array:
    return scores_from_outputs(state, infer(model, images))


def percentile_threshold(scores: npt.ArrayLike, percentile: float) -> float:
    values = np.asarray(scores, dtype=np.float64)
    if values.size == 0:
        raise DetectorError("Cannot select a threshold from an empty score set.")
    if not 0.0 <= percentile < 100.0:  # noqa: PLR2004
        msg = f"Percentile must lie in [0, 100), got {percentile}."
        raise ValueError(msg)
    if percentile == 0.0:
        # Strictly below the minimum so that every reference score passes `score > T`.
        return float(np.nextafter(values.min(), -np.inf))
    return float(np.percentile(values, percentile, method="linear"))


def threshold_select(state: DetectorState, model: NetworkModel, reference: Dataset, percentile: float) -> float:
    """q-th percentile of the metric over the correctly classified points of `reference`."""
    outputs = infer(model, reference.images)
    correct = outputs.labels == reference.labels
    if not np.any(correct):
        raise DetectorError("No correctly classified reference points to calibrate on.")
    scores = scores_from_outputs(state, outputs)[correct]
    threshold = percentile_threshold(scores, percentile)
    logger.info("Selected %s threshold %.6g at q=%g over %d points", state.metric, threshold, percentile, scores.size)
    return threshold


def calibrate(state: DetectorState, model: NetworkModel, reference: Dataset, percentile: float) -> DetectorState:
    return state.with_threshold(threshold_select(state, model, reference, percentile), percentile)


def decide(label: int, score: float, threshold: float) -> Decision:
    return label if score > threshold else NOT_SURE


def thresholded_predict(state: DetectorState, model: NetworkModel, x: Array) -> Decision:
    outputs = infer(model, x[np.newaxis])
    return decide(int(outputs.labels[0]), float(scores_from_outputs(state, outputs)[0]), state.threshold)


def thresholded_predict_batch(state: DetectorState, model: NetworkModel, images: Array) -> list[Decision]:
    outputs = infer(model, images)
    scores = scores_from_outputs(state, outputs)
    pairs = zip(outputs.labels, scores, strict=True)
    return [decide(int(label), float(score), state.threshold) for label, score in pairs]
