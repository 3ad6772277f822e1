"""End-to-end trends on MNIST with the shallow desk CNN.

Needs the four IDX files (optionally gzipped) under data/mnist.
"""

import dataclasses
from pathlib import Path

import numpy as np
import pytest

from py_rce_detect.attacks import AttackConfig, AttackFamily
from py_rce_detect.classifier import TrainConfig, accuracy, train
from py_rce_detect.datasets import Dataset, load_mnist_dir
from py_rce_detect.detectors import (
    NOT_SURE,
    DetectorState,
    Metric,
    calibrate,
    default_bandwidth,
    kdensity_eta,
    kdensity_fit,
    thresholded_predict_batch,
)
from py_rce_detect.evaluation import (
    accuracy_vs_epsilon,
    build_detection_cohort,
    cohort_auc,
    f2_positive_ratio,
    minimal_distortions,
    noise_evaluation,
)
from py_rce_detect.factories import create_model
from py_rce_detect.network import NetworkModel, Objective

MNIST_DIR = Path("data/mnist")

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(not MNIST_DIR.exists(), reason="MNIST files not found under data/mnist"),
]

type Trained = tuple[NetworkModel, DetectorState]
type Splits = tuple[Dataset, Dataset]

RECIPE = TrainConfig(steps=6000, lr_boundaries=(3000, 4500, 6000), seed=11)


@pytest.fixture(scope="module")
def mnist() -> Splits:
    return load_mnist_dir(MNIST_DIR, "train"), load_mnist_dir(MNIST_DIR, "test")


def _fit(objective: Objective, train_set: Dataset) -> Trained:
    model = create_model("shallow-cnn", train_set.image_shape, 10, objective, seed=3)
    train(model, train_set, dataclasses.replace(RECIPE, objective=objective))
    reference = train_set.head(10_000)
    state = kdensity_fit(model, reference, default_bandwidth(objective), max_bank_size=2000, seed=4)
    state = state.with_eta(kdensity_eta(state, model, reference))
    return model, calibrate(state, model, reference, 5.0)


@pytest.fixture(scope="module")
def ce(mnist: Splits) -> Trained:
    return _fit(Objective.CE, mnist[0])


@pytest.fixture(scope="module")
def rce(mnist: Splits) -> Trained:
    return _fit(Objective.RCE, mnist[0])


class TestTraining:
    def test_error_rates(self, ce: Trained, rce: Trained, mnist: Splits) -> None:
        test_set = mnist[1]
        ce_error = 1.0 - accuracy(ce[0], test_set)
        rce_error = 1.0 - accuracy(rce[0], test_set)
        assert ce_error <= 0.025
        assert rce_error <= ce_error + 0.01


class TestDetection:
    @pytest.mark.parametrize("family", [AttackFamily.FGSM, AttackFamily.JSMA, AttackFamily.CW])
    def test_kdensity_auc(self, family: AttackFamily, ce: Trained, rce: Trained, mnist: Splits) -> None:
        subset = mnist[1].head(600)
        config = AttackConfig(family, epsilon=0.2, max_iterations=1000, seed=5)
        aucs: dict[str, float | None] = {}
        for name, (model, state) in (("ce", ce), ("rce", rce)):
            cohort = build_detection_cohort(model, config, subset, detector=state, threads=4)
            assert len(cohort) >= 200
            aucs[name] = cohort_auc(model, cohort, Metric.KDENSITY, state)
        assert aucs["rce"] is not None
        assert aucs["rce"] >= 0.85
        assert aucs["ce"] is None or aucs["rce"] >= aucs["ce"] - 0.02

    def test_held_out_pass_rate(self, rce: Trained, mnist: Splits) -> None:
        model, state = rce
        verdicts = thresholded_predict_batch(state, model, mnist[1].images[-2000:])
        assert np.mean([verdict is not NOT_SURE for verdict in verdicts]) >= 0.94

    def test_noise_passes(self, rce: Trained, mnist: Splits) -> None:
        model, state = rce
        summary = noise_evaluation(model, state, mnist[1].head(1000), 0.04, seed=6)
        assert summary.pass_rate >= 0.9
        assert summary.noisy_accuracy >= summary.clean_accuracy - 0.02


class TestAttackTrends:

    @pytest.mark.parametrize("family", [AttackFamily.FGSM, AttackFamily.BIM])
    def test_rce_curve_not_below_ce(self, family: AttackFamily, ce: Trained, rce: Trained, mnist: Splits) -> None:
        subset = mnist[1].head(500)
        epsilons = [0.02, 0.05, 0.1, 0.2, 0.3]
        ce_curve = accuracy_vs_epsilon(ce[0], family, epsilons, subset, threads=4)
        rce_curve = accuracy_vs_epsilon(rce[0], family, epsilons, subset, threads=4)
        for (epsilon, ce_accuracy), (_, rce_accuracy) in zip(ce_curve, rce_curve, strict=True):
            assert rce_accuracy >= ce_accuracy - 0.02, f"epsilon={epsilon}"
    def test_minimal_distortion(self, ce: Trained, rce: Trained, mnist: Splits) -> None:
        subset = mnist[1].head(100)
        config = AttackConfig(AttackFamily.CW, max_iterations=1000, seed=7)
        ce_mean = minimal_distortions(ce[0], subset, config, threads=4).mean
        rce_mean = minimal_distortions(rce[0], subset, config, threads=4).mean
        assert ce_mean is not None
        assert rce_mean is not None
        assert rce_mean > ce_mean

    def test_white_box_ratio(self, ce: Trained, rce: Trained, mnist: Splits) -> None:
        subset = mnist[1].head(100)
        config = AttackConfig(AttackFamily.CW_WB, max_iterations=1000, seed=8)
        ce_ratio = f2_positive_ratio(ce[0], ce[1], subset, config, threads=4)
        rce_ratio = f2_positive_ratio(rce[0], rce[1], subset, config, threads=4)
        assert rce_ratio.successes >= 50
        assert ce_ratio.ratio is not None
        assert rce_ratio.ratio is not None
        assert rce_ratio.ratio >= ce_ratio.ratio + 0.1

    def test_high_confidence_white_box(self, ce: Trained, rce: Trained, mnist: Splits) -> None:
        subset = mnist[1].head(50)
        config = AttackConfig(AttackFamily.CW_WB, kappa=5.0, max_iterations=1000, seed=9)
        for model, state in (ce, rce):
            summary = f2_positive_ratio(model, state, subset, config, threads=4)
            assert summary.ratio in {None, 1.0}
