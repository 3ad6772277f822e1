import csv
import dataclasses
import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Final

import numpy as np
import numpy.typing as npt
from scipy.stats import rankdata

from py_rce_detect.attacks import AttackConfig, AttackFamily, AttackResult, AttackRun, run_attack, uniform_noise
from py_rce_detect.classifier import infer
from py_rce_detect.datasets import Dataset, unscale_pixels
from py_rce_detect.detectors import (
    DetectorState,
    Metric,
    confidence_scores,
    kdensity_log_scores,
    kdensity_scores,
    non_me_scores,
)
from py_rce_detect.network import NetworkModel
from py_rce_detect.tensor import Array

logger = logging.getLogger(__name__)

EPSILON_GRID: Final = (0.02, 0.05, 0.1, 0.2, 0.3)
CSV_COLUMNS: Final = ("run_id", "dataset", "objective", "attack", "metric", "epsilon", "kappa", "value", "n")
AUC_ORIENTATION: Final = "probability that a normal example scores above an adversarial one"


def roc_auc(normal_scores: npt.ArrayLike, adversarial_scores: npt.ArrayLike) -> float:
    """Rank-sum AUC with normal examples scoring high; ties count one half."""
    normal = np.asarray(normal_scores, dtype=np.float64).ravel()
    adversarial = np.asarray(adversarial_scores, dtype=np.float64).ravel()
    if normal.size == 0 or adversarial.size == 0:
        raise ValueError("AUC needs at least one normal and one adversarial score.")
    ranks = rankdata(np.concatenate([normal, adversarial]), method="average")
    rank_sum = ranks[: normal.size].sum()
    wins = rank_sum - normal.size * (normal.size + 1) / 2.0
    return float(wins / (normal.size * adversarial.size))


def distortion(x: Array, x_adv: Array) -> float:
    """‖x - x*‖₂ / √d on the 0..255 pixel scale."""
    diff = unscale_pixels(x_adv) - unscale_pixels(x)
    return float(np.linalg.norm(diff.ravel()) / math.sqrt(diff.size))


# ============================================================================
# Cohorts and detection AUC
# ============================================================================


@dataclass(frozen=True, slots=True)
class DetectionCohort:
    normal: Array
    adversarial: Array
    labels: npt.NDArray[np.int64]
    indices: npt.NDArray[np.int64]  # positions in the attacked dataset
    run: AttackRun | None = None

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def build_detection_cohort(
    model: NetworkModel,
    config: AttackConfig,
    dataset: Dataset,
    *,
    detector: DetectorState | None = None,
    threads: int = 1,
) -> DetectionCohort:
    """Correctly classified inputs paired with their successful adversarial counterparts."""
    predicted = infer(model, dataset.images).labels
    correct = np.flatnonzero(predicted == dataset.labels)
    run = run_attack(
        model, dataset.images[correct], dataset.labels[correct], config, detector=detector, threads=threads
    )
    keep = run.success if len(run) else np.zeros(0, dtype=bool)
    indices = correct[keep]
    adversarial = run.adversarial[keep] if len(run) else dataset.images[:0]
    if indices.size == 0:
        logger.warning("%s produced an empty cohort; AUC is skipped", config.family.value)
    return DetectionCohort(dataset.images[indices], adversarial, dataset.labels[indices], indices, run)


def detection_scores(model: NetworkModel, images: Array, metric: Metric, detector: DetectorState | None) -> Array:
    """Per-image scores in the detector's threshold space (log KD for K-density)."""
    outputs = infer(model, images)
    match metric:
        case Metric.CONFIDENCE:
            return confidence_scores(outputs.probs)
        case Metric.NON_ME:
            return non_me_scores(outputs.probs)
        case Metric.KDENSITY:
            if detector is None:
                raise ValueError("K-density scores need a fitted detector.")
            return kdensity_log_scores(detector, outputs.hidden, outputs.labels)


def kdensity_values(model: NetworkModel, images: Array, detector: DetectorState) -> Array:
    outputs = infer(model, images)
    return kdensity_scores(detector, outputs.hidden, outputs.labels)


def cohort_auc(
    model: NetworkModel, cohort: DetectionCohort, metric: Metric, detector: DetectorState | None
) -> float | None:
    if len(cohort) == 0:
        return None
    return roc_auc(
        detection_scores(model, cohort.normal, metric, detector),
        detection_scores(model, cohort.adversarial, metric, detector),
    )


# ============================================================================
# Robustness curves and distortion
# ============================================================================


def accuracy_vs_epsilon(
    model: NetworkModel,
    family: AttackFamily,
    epsilons: Sequence[float],
    dataset: Dataset,
    *,
    base: AttackConfig | None = None,
    threads: int = 1,
) -> list[tuple[float, float]]:
    """Accuracy on attacked inputs at each ε, with no rejection. JSMA sweeps its per-pixel offset."""
    if not family.sweeps_epsilon:
        msg = f"{family.value} has no perturbation size to sweep."
        raise ValueError(msg)
    template = base if base is not None else AttackConfig(family)
    series = []
    for epsilon in epsilons:
        config = dataclasses.replace(template, family=family, epsilon=epsilon)
        if family is AttackFamily.JSMA:
            config = dataclasses.replace(config, jsma_offset=epsilon)
        run = run_attack(model, dataset.images, dataset.labels, config, threads=threads)
        predicted = infer(model, run.adversarial).labels
        series.append((float(epsilon), float(np.mean(predicted == dataset.labels))))
        logger.info("%s eps=%g accuracy %.4f", family.value, epsilon, series[-1][1])
    return series


@dataclass(frozen=True, slots=True)
class DistortionSummary:
    values: tuple[float | None, ...]  # None where every search round failed

    @property
    def failures(self) -> int:
        return sum(value is None for value in self.values)

    @property
    def mean(self) -> float | None:
        found = [value for value in self.values if value is not None]
        return float(np.mean(found)) if found else None


def minimal_distortion(model: NetworkModel, x: Array, label: int, config: AttackConfig) -> float | None:
    run = run_attack(model, x[np.newaxis], [label], config)
    result = run.results[0]
    return distortion(x, result.adversarial) if result.success else None


def minimal_distortions(
    model: NetworkModel,
    dataset: Dataset,
    config: AttackConfig,
    *,
    detector: DetectorState | None = None,
    threads: int = 1,
) -> DistortionSummary:
    run = run_attack(model, dataset.images, dataset.labels, config, detector=detector, threads=threads)
    return DistortionSummary(
        tuple(
            distortion(dataset.images[i], result.adversarial) if result.success else None
            for i, result in enumerate(run.results)
        )
    )


# ============================================================================
# White-box ratio, transfer, noise
# ============================================================================


@dataclass(frozen=True, slots=True)
class RatioSummary:
    successes: int
    positives: int

    @property
    def ratio(self) -> float | None:
        return self.positives / self.successes if self.successes else None


def positive_ratio(results: Iterable[AttackResult]) -> RatioSummary:
    successes = positives = 0
    for result in results:
        if result.success:
            successes += 1
            positives += int(result.f2 is not None and result.f2 > 0)
    return RatioSummary(successes, positives)


def f2_positive_ratio(
    model: NetworkModel,
    detector: DetectorState,
    dataset: Dataset,
    config: AttackConfig,
    *,
    threads: int = 1,
) -> RatioSummary:
    run = run_attack(model, dataset.images, dataset.labels, config, detector=detector, threads=threads)
    summary = positive_ratio(run.results)
    if summary.ratio is None:
        logger.warning("No successful white-box attacks; the f2 ratio is undefined")
    return summary


@dataclass(frozen=True, slots=True)
class TransferSummary:
    transfer_rate: float
    direct_rate: float
    auc: float | None
    n: int
    family: AttackFamily  # what was crafted on the substitute


def transfer_eval(
    substitute: NetworkModel,
    target: NetworkModel,
    config: AttackConfig,
    dataset: Dataset,
    *,
    target_detector: DetectorState,
    substitute_detector: DetectorState | None = None,
    threads: int = 1,
) -> TransferSummary:
    """Craft on `substitute`, then measure misclassification and K-density AUC on `target`.

    White-box families are crafted against `substitute_detector`, the substitute's own K-density detector.
    """
    run = run_attack(
        substitute, dataset.images, dataset.labels, config, detector=substitute_detector, threads=threads
    )
    count = len(run)
    if count == 0:
        return TransferSummary(math.nan, math.nan, None, 0, config.family)
    adversarial = run.adversarial
    crafted = run.success
    fooled = infer(target, adversarial).labels != dataset.labels
    transferred = crafted & fooled
    clean = infer(target, dataset.images).labels == dataset.labels
    auc = None
    if np.any(clean) and np.any(transferred):
        auc = roc_auc(
            detection_scores(target, dataset.images[clean], Metric.KDENSITY, target_detector),
            detection_scores(target, adversarial[transferred], Metric.KDENSITY, target_detector),
        )
    return TransferSummary(float(transferred.mean()), float(crafted.mean()), auc, count, run.family)


def accuracy_vs_cw_constant(
    model: NetworkModel,
    constants: Sequence[float],
    dataset: Dataset,
    *,
    base: AttackConfig | None = None,
    threads: int = 1,
) -> list[tuple[float, float]]:
    """Accuracy under a single-round C&W attack at each fixed constant c."""
    template = base if base is not None else AttackConfig(AttackFamily.CW)
    series = []
    for const in constants:
        config = dataclasses.replace(template, search_rounds=1, initial_c=const)
        run = run_attack(model, dataset.images, dataset.labels, config, threads=threads)
        predicted = infer(model, run.adversarial).labels
        series.append((float(const), float(np.mean(predicted == dataset.labels))))
    return series


@dataclass(frozen=True, slots=True)
class NoiseSummary:
    clean_accuracy: float
    noisy_accuracy: float
    pass_rate: float  # noisy inputs scoring above the detector threshold
    noisy_scores: Array


def noise_evaluation(
    model: NetworkModel, detector: DetectorState, dataset: Dataset, epsilon: float, seed: int
) -> NoiseSummary:
    noisy = uniform_noise(dataset.images, epsilon, seed)
    clean_labels = infer(model, dataset.images).labels
    outputs = infer(model, noisy)
    scores = detection_scores(model, noisy, detector.metric, detector)
    return NoiseSummary(
        float(np.mean(clean_labels == dataset.labels)),
        float(np.mean(outputs.labels == dataset.labels)),
        float(np.mean(scores > detector.threshold)),
        scores,
    )


def kdensity_histogram(
    scores: npt.ArrayLike, bins: int = 20, value_range: tuple[float, float] = (0.0, 1.0)
) -> tuple[npt.NDArray[np.int64], Array]:
    counts, edges = np.histogram(np.asarray(scores, dtype=np.float64), bins=bins, range=value_range)
    return counts.astype(np.int64), edges


# ============================================================================
# Reports
# ============================================================================


@dataclass(frozen=True, slots=True)
class Measurement:
    run_id: str
    dataset: str
    objective: str
    attack: str
    metric: str
    epsilon: float | None
    kappa: float | None
    value: float | None
    n: int


@dataclass(frozen=True, slots=True)
class EvalReport:
    run_id: str
    measurements: tuple[Measurement, ...] = ()
    metadata: dict[str, Any] = field(default_factory=dict)


def _csv_cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(report: EvalReport, directory: Path) -> tuple[Path, Path]:
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / "report.csv"
    json_path = directory / "report.json"
    with csv_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for measurement in report.measurements:
            writer.writerow([_csv_cell(getattr(measurement, column)) for column in CSV_COLUMNS])
    payload = {
        "run_id": report.run_id,
        "metadata": {"auc_orientation": AUC_ORIENTATION, **report.metadata},
        "measurements": [dataclasses.asdict(m) for m in report.measurements],
    }
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Wrote %d measurements to %s", len(report.measurements), csv_path)
    return csv_path, json_path


def load_report(json_path: Path) -> EvalReport:
    payload = json.loads(json_path.read_text(encoding="utf-8"))
    measurements = tuple(Measurement(**row) for row in payload["measurements"])
    metadata = {key: value for key, value in payload["metadata"].items() if key != "auc_orientation"}
    return EvalReport(payload["run_id"], measurements, metadata)
