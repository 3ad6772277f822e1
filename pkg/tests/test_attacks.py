import dataclasses
import math

import numpy as np
import pytest
from conftest import numeric_gradient
from hypothesis import given, seed, settings
from hypothesis import strategies as st

from py_rce_detect.attacks import (
    AttackConfig,
    AttackFamily,
    _DensityTerm,
    bim,
    choose_targets,
    cw,
    cw_hc,
    cw_wb,
    fgsm,
    ilcm,
    jsma,
    least_likely_label,
    pixels_to_tanh,
    run_attack,
    saliency,
    tanh_to_pixels,
    uniform_noise,
)
from py_rce_detect.classifier import infer
from py_rce_detect.datasets import Dataset
from py_rce_detect.detectors import DetectorState, Metric, kdensity_log_scores
from py_rce_detect.evaluation import distortion
from py_rce_detect.exception import DetectorError
from py_rce_detect.factories import create_model
from py_rce_detect.network import NetworkModel, Objective
from py_rce_detect.tensor import Array, Tensor


def linear_pair(w0: tuple[float, float], w1: tuple[float, float], b0: float = 0.0, b1: float = 0.0) -> NetworkModel:
    """Two-class linear model on 1×1×2 inputs with the given class weights."""
    model = create_model("linear", (1, 1, 2), 2, Objective.CE)
    model.load_params({"dense0/weight": np.array([w0, w1]).T, "dense0/bias": np.array([b0, b1])})
    return model


def scaled_identity(num_classes: int, scale: float = 30.0) -> NetworkModel:
    """Linear model on 1×1×L inputs whose class k logit is scale · x_k."""
    model = create_model("linear", (1, 1, num_classes), num_classes, Objective.CE)
    model.load_params({"dense0/weight": scale * np.eye(num_classes), "dense0/bias": np.zeros(num_classes)})
    return model


def small_cw(family: AttackFamily = AttackFamily.CW, **changes: object) -> AttackConfig:
    return dataclasses.replace(
        AttackConfig(family, search_rounds=6, max_iterations=300, initial_c=0.1, chunk_size=4), **changes
    )


# ============================================================================
# Gradient-sign attacks
# ============================================================================


class TestFgsm:
    """One signed gradient step."""

    def test_zero_budget(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        results = fgsm(ce_model, blobs.images[:5], blobs.labels[:5], 0.0)
        clean = infer(ce_model, blobs.images[:5]).labels
        for x, result, label, y in zip(blobs.images[:5], results, clean, blobs.labels[:5], strict=True):
            np.testing.assert_array_equal(result.adversarial, x)
            assert result.success == (label != y)

    def test_sign_of_gradient(self) -> None:
        """The loss gradient has sign (+, -), so the step is (+ε, -ε)."""
        model = linear_pair((0.0, 0.0), (0.3, -0.2))
        x = np.zeros((1, 1, 1, 2))
        result = fgsm(model, x, np.array([0]), 0.1)[0]
        np.testing.assert_allclose(result.adversarial.ravel(), [0.1, -0.1])

    def test_linear_flip_threshold(self) -> None:
        """Logit gap 0.3 against ‖w₀ - w₁‖₁ = 3 flips exactly past ε = 0.1."""
        model = linear_pair((1.0, -2.0), (0.0, 0.0), b0=0.3)
        x = np.zeros((1, 1, 1, 2))
        assert not fgsm(model, x, np.array([0]), 0.09)[0].success
        assert fgsm(model, x, np.array([0]), 0.11)[0].success

    def test_negative_budget(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        with pytest.raises(ValueError, match="non-negative"):
            fgsm(ce_model, blobs.images[:1], blobs.labels[:1], -0.1)


class TestBim:
    """Iterated FGSM with projection."""

    def test_one_iteration_is_fgsm(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        single = fgsm(ce_model, blobs.images[:6], blobs.labels[:6], 0.2)
        iterated = bim(ce_model, blobs.images[:6], blobs.labels[:6], 0.2, 1)
        for a, b in zip(single, iterated, strict=True):
            np.testing.assert_array_equal(a.adversarial, b.adversarial)

    @settings(max_examples=10, deadline=None)
    @seed(11)
    @given(st.floats(0.0, 0.4), st.integers(1, 6))
    def test_stays_in_ball_and_domain(
        self, ce_model: NetworkModel, blobs: Dataset, epsilon: float, iterations: int
    ) -> None:
        images = blobs.images[:4]
        for x, result in zip(images, bim(ce_model, images, blobs.labels[:4], epsilon, iterations), strict=True):
            assert np.abs(result.adversarial - x).max() <= epsilon + 1e-12
            assert result.adversarial.min() >= -0.5
            assert result.adversarial.max() <= 0.5


class TestIlcm:
    """Descent toward the least likely class."""

    def test_least_likely(self) -> None:
        assert least_likely_label([0.7, 0.2, 0.1]) == 2

    def test_zero_budget(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        for x, result in zip(blobs.images[:4], ilcm(ce_model, blobs.images[:4], 0.0, 5), strict=True):
            np.testing.assert_array_equal(result.adversarial, x)
            assert not result.success

    def test_target_differs_from_prediction(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        predicted = infer(ce_model, blobs.images[:10]).labels
        results = ilcm(ce_model, blobs.images[:10], 0.3, 5)
        assert all(result.target != label for result, label in zip(results, predicted, strict=True))


class TestUniformNoise:
    """Bounded uniform noise."""

    def test_zero_budget(self, blobs: Dataset) -> None:
        np.testing.assert_array_equal(uniform_noise(blobs.images, 0.0, 1), blobs.images)

    def test_support(self, blobs: Dataset) -> None:
        noisy = uniform_noise(blobs.images, 0.04, 2)
        assert np.abs(noisy - blobs.images).max() <= 0.04

    def test_zero_mean(self) -> None:
        """The mean perturbation over 10⁵ draws is within three standard errors of zero."""
        x = np.zeros((100_000, 1, 1, 1))
        epsilon = 0.1
        noise = uniform_noise(x, epsilon, 3).ravel()
        standard_error = epsilon / math.sqrt(3.0) / math.sqrt(noise.size)
        assert abs(noise.mean()) < 3 * standard_error


# ============================================================================
# JSMA
# ============================================================================


class TestJsma:
    """Greedy saliency-map attack."""

    def test_saliency_values(self) -> None:
        scores = saliency(np.array([0.5, 0.1]), np.array([-0.2, -0.9]))
        np.testing.assert_allclose(scores, [0.10, 0.09])
        assert int(np.argmax(scores)) == 0

    def test_negative_target_gradient(self) -> None:
        assert saliency(np.array([-0.5]), np.array([-1.0]))[0] == 0.0

    def test_positive_others_gradient(self) -> None:
        assert saliency(np.array([0.5]), np.array([0.3]))[0] == 0.0

    def test_picks_pixel_by_probability_saliency(self) -> None:
        """Softmax gradients rank pixel 3 first; raw logit gradients would favour pixel 1."""
        weights = np.array([[-0.7, -0.2, 1.7, 0.7], [-1.6, 0.0, -0.6, 0.1], [-1.6, 0.2, 0.2, 1.6]])
        model = create_model("linear", (1, 1, 4), 3, Objective.CE)
        model.load_params({"dense0/weight": weights.T, "dense0/bias": np.array([0.3, 0.5, -1.5])})
        x = np.zeros((1, 1, 1, 4))
        target = np.array([2])

        def probability(v: Array, k: int) -> float:
            return float(infer(model, v.reshape(1, 1, 1, 4)).probs[0, k])

        def others(v: Array) -> float:
            return sum(probability(v, k) for k in (0, 1))

        expected = saliency(
            numeric_gradient(lambda v: probability(v, 2), x[0].copy()).ravel(),
            numeric_gradient(others, x[0].copy()).ravel(),
        )
        assert int(np.argmax(expected)) == 3
        assert int(np.argmax(saliency(weights[2], weights[0] + weights[1]))) == 1

        result = jsma(model, x, target, max_pixels=1)[0]
        assert np.flatnonzero(result.adversarial.ravel() != 0.0).tolist() == [3]

    def test_already_target(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        predicted = infer(ce_model, blobs.images[:3]).labels
        for x, result in zip(blobs.images[:3], jsma(ce_model, blobs.images[:3], predicted), strict=True):
            assert result.success
            assert result.iterations == 0
            np.testing.assert_array_equal(result.adversarial, x)

    def test_pixel_budget(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        targets = choose_targets(blobs.labels[:8], blobs.num_classes, 4)
        results = jsma(ce_model, blobs.images[:8], targets, max_pixels=3)
        for x, result in zip(blobs.images[:8], results, strict=True):
            assert result.iterations <= 3
            assert np.count_nonzero(result.adversarial != x) <= result.iterations
            if result.success:
                assert infer(ce_model, result.adversarial[np.newaxis]).labels[0] == result.target

    def test_reaches_targets(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        targets = choose_targets(blobs.labels[:8], blobs.num_classes, 5)
        results = jsma(ce_model, blobs.images[:8], targets, max_pixels=16)
        assert any(result.success for result in results)


# ============================================================================
# Carlini & Wagner
# ============================================================================


class TestCarliniWagner:
    """Optimization attacks in tanh space."""

    def test_tanh_midpoint(self) -> None:
        assert tanh_to_pixels(np.zeros(3)).tolist() == [0.0, 0.0, 0.0]

    def test_tanh_round_trip(self, blobs: Dataset) -> None:
        np.testing.assert_allclose(tanh_to_pixels(pixels_to_tanh(blobs.images)), blobs.images, atol=1e-6)

    @pytest.mark.parametrize("model_name", ["ce_model", "rce_model"])
    def test_success(self, model_name: str, blobs: Dataset, request: pytest.FixtureRequest) -> None:
        model: NetworkModel = request.getfixturevalue(model_name)
        images, labels = blobs.images[:8], blobs.labels[:8]
        targets = choose_targets(labels, blobs.num_classes, 6)
        results = cw(model, images, targets, small_cw())
        assert np.mean([result.success for result in results]) >= 0.75
        predicted = infer(model, np.stack([result.adversarial for result in results])).labels
        for result, label in zip(results, predicted, strict=True):
            if result.success:
                assert label == result.target
                assert result.const is not None

    def test_high_confidence_margin(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        images, labels = blobs.images[:6], blobs.labels[:6]
        targets = choose_targets(labels, blobs.num_classes, 7)
        results = cw_hc(ce_model, images, targets, small_cw(AttackFamily.CW_HC))
        assert any(result.success for result in results)
        logits = infer(ce_model, np.stack([result.adversarial for result in results])).logits
        for row, result in zip(logits, results, strict=True):
            if result.success:
                others = np.delete(row, result.target)
                assert row[result.target] - others.max() >= 10.0 - 1e-9

    def test_zero_kappa_is_plain(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        images, labels = blobs.images[:4], blobs.labels[:4]
        targets = choose_targets(labels, blobs.num_classes, 8)
        plain = cw(ce_model, images, targets, small_cw(max_iterations=50))
        degenerate = cw_hc(ce_model, images, targets, small_cw(AttackFamily.CW_HC, kappa=0.0, max_iterations=50))
        for a, b in zip(plain, degenerate, strict=True):
            np.testing.assert_array_equal(a.adversarial, b.adversarial)
            assert a.success == b.success

    def test_ten_classes_reach_high_confidence(self) -> None:
        model = scaled_identity(10)
        images = np.zeros((3, 1, 1, 10))
        images[..., 0] = 0.1
        targets = np.array([3, 7, 9])
        results = cw_hc(model, images, targets, small_cw(AttackFamily.CW_HC))
        assert all(result.success for result in results)
        probs = infer(model, np.stack([result.adversarial for result in results])).probs
        assert np.all(probs[np.arange(3), targets] > 0.99)

    def test_margin_costs_distortion(self) -> None:
        """Reaching a margin of 10 moves each input at least as far as reaching the target at all."""
        model = scaled_identity(10)
        images = np.zeros((3, 1, 1, 10))
        images[..., 0] = 0.1
        targets = np.array([3, 7, 9])
        plain = cw(model, images, targets, small_cw())
        confident = cw_hc(model, images, targets, small_cw(AttackFamily.CW_HC))
        for x, low, high in zip(images, plain, confident, strict=True):
            assert low.success
            assert high.success
            assert distortion(x, high.adversarial) >= distortion(x, low.adversarial)

    def test_default_margins(self) -> None:
        assert AttackConfig(AttackFamily.CW_HC).confidence_margin == 10.0
        assert AttackConfig(AttackFamily.CW).confidence_margin == 0.0
        assert AttackConfig(AttackFamily.CW_HC, kappa=3.0).confidence_margin == 3.0


class TestWhiteBox:
    """C&W with the K-density hinge."""

    def test_hinge_matches_detector(self, ce_detector: DetectorState, ce_model: NetworkModel, blobs: Dataset) -> None:
        """The differentiable log KD equals the detector's."""
        hidden = infer(ce_model, blobs.images[:10]).hidden
        targets = choose_targets(blobs.labels[:10], blobs.num_classes, 9)
        eta = 0.5
        hinge = _DensityTerm.build(ce_detector, targets, eta).hinge(Tensor(hidden)).data
        log_kd = kdensity_log_scores(ce_detector, hidden, targets)
        np.testing.assert_allclose(hinge, np.maximum(-log_kd - eta, 0.0), atol=1e-7)

    def test_hinge_zero_above_density_floor(
        self, ce_detector: DetectorState, ce_model: NetworkModel, blobs: Dataset
    ) -> None:
        hidden = infer(ce_model, blobs.images[:10]).hidden
        log_kd = kdensity_log_scores(ce_detector, hidden, blobs.labels[:10])
        eta = float(-log_kd.min()) + 1.0
        hinge = _DensityTerm.build(ce_detector, blobs.labels[:10], eta).hinge(Tensor(hidden)).data
        np.testing.assert_array_equal(hinge, np.zeros(10))

    def test_reports_f2(self, ce_detector: DetectorState, ce_model: NetworkModel, blobs: Dataset) -> None:
        images, labels = blobs.images[:4], blobs.labels[:4]
        targets = choose_targets(labels, blobs.num_classes, 10)
        results = cw_wb(ce_model, ce_detector, images, targets, small_cw(AttackFamily.CW_WB, max_iterations=100))
        hidden = infer(ce_model, np.stack([result.adversarial for result in results])).hidden
        eta = ce_detector.eta
        assert eta is not None
        log_kd = kdensity_log_scores(ce_detector, hidden, targets)
        for result, value in zip(results, log_kd, strict=True):
            assert result.f2 is not None
            if result.success:
                assert result.f2 == pytest.approx(max(-value - eta, 0.0), abs=1e-6)

    def test_needs_kdensity_detector(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        with pytest.raises(DetectorError, match="K-density"):
            cw_wb(ce_model, DetectorState(Metric.CONFIDENCE), blobs.images[:1], np.array([1]), small_cw())

    def test_needs_eta(self, ce_detector: DetectorState, ce_model: NetworkModel, blobs: Dataset) -> None:
        no_eta = dataclasses.replace(ce_detector, eta=None)
        with pytest.raises(DetectorError, match="eta"):
            cw_wb(ce_model, no_eta, blobs.images[:1], np.array([1]), small_cw(AttackFamily.CW_WB))


# ============================================================================
# Batch driver
# ============================================================================


class TestRunAttack:
    """Chunked, threaded dispatch."""

    @seed(12)
    @given(st.lists(st.integers(0, 9), min_size=1, max_size=50), st.integers(2, 10), st.integers(0, 1000))
    def test_targets_never_labels(self, labels: list[int], num_classes: int, target_seed: int) -> None:
        y = np.array(labels) % num_classes
        targets = choose_targets(y, num_classes, target_seed)
        assert np.all(targets != y)
        assert np.all((targets >= 0) & (targets < num_classes))

    @pytest.mark.parametrize("family", [AttackFamily.FGSM, AttackFamily.JSMA, AttackFamily.RAND])
    def test_thread_count_does_not_matter(self, family: AttackFamily, ce_model: NetworkModel, blobs: Dataset) -> None:
        config = AttackConfig(family, epsilon=0.2, max_pixels=4, chunk_size=3, seed=5)
        single = run_attack(ce_model, blobs.images[:10], blobs.labels[:10], config, threads=1)
        pooled = run_attack(ce_model, blobs.images[:10], blobs.labels[:10], config, threads=4)
        np.testing.assert_array_equal(single.adversarial, pooled.adversarial)
        np.testing.assert_array_equal(single.targets, pooled.targets)
        np.testing.assert_array_equal(single.success, pooled.success)

    def test_untargeted_marker(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        run = run_attack(ce_model, blobs.images[:5], blobs.labels[:5], AttackConfig(AttackFamily.FGSM))
        assert run.targets.tolist() == [-1] * 5
        assert len(run) == 5

    def test_ilcm_targets_filled(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        run = run_attack(ce_model, blobs.images[:5], blobs.labels[:5], AttackConfig(AttackFamily.ILCM, epsilon=0.2))
        assert np.all(run.targets >= 0)

    def test_empty_batch(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        run = run_attack(ce_model, blobs.images[:0], blobs.labels[:0], AttackConfig(AttackFamily.CW))
        assert len(run) == 0

    def test_white_box_needs_detector(self, ce_model: NetworkModel, blobs: Dataset) -> None:
        with pytest.raises(DetectorError):
            run_attack(ce_model, blobs.images[:2], blobs.labels[:2], AttackConfig(AttackFamily.CW_WB))

    def test_config_lists_every_problem(self) -> None:
        with pytest.raises(ValueError, match="epsilon") as info:
            AttackConfig(AttackFamily.FGSM, epsilon=-1.0, iterations=0, chunk_size=0)
        assert "iterations" in str(info.value)
        assert "chunk_size" in str(info.value)
