import math

import numpy as np
import pytest
from hypothesis import given, seed, settings
from hypothesis import strategies as st

from py_rce_detect.exception import InfeasibleGeometryError, ShapeError
from py_rce_detect.geometry import (
    SoftmaxGeometry,
    boundary_confidence_bound,
    confidence_respects_bound,
    equal_logit_point,
    logits_at,
    non_me_of_logits,
    random_geometry,
    reverse_bounds,
    shift_along_manifold,
    softmax_of,
    verify_lemma1,
    verify_suite,
    verify_theorem1_boundary,
    verify_theorem2,
)

# ============================================================================
# Geometry
# ============================================================================


class TestLogits:
    def test_zero_hidden_gives_bias(self) -> None:
        geometry = random_geometry(4, 6, seed=0)
        np.testing.assert_array_equal(logits_at(geometry, np.zeros(6)), geometry.bias)

    def test_basis_vector(self) -> None:
        geometry = SoftmaxGeometry(np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(logits_at(geometry, [1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])

    @seed(20)
    @given(st.integers(0, 10_000))
    def test_matches_matmul(self, geometry_seed: int) -> None:
        geometry = random_geometry(5, 7, geometry_seed)
        z = np.random.default_rng(geometry_seed).normal(size=7)
        np.testing.assert_allclose(logits_at(geometry, z), geometry.weights @ z + geometry.bias)

    def test_dimension_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            logits_at(random_geometry(3, 4, seed=0), np.zeros(5))

    def test_duplicate_rows(self) -> None:
        with pytest.raises(ValueError, match="coincide"):
            SoftmaxGeometry(np.array([[1.0, 2.0], [1.0, 2.0]]), np.zeros(2))


class TestManifoldShift:
    """Moves that keep the non-maximal logit differences fixed."""

    def test_zero_offsets(self) -> None:
        geometry = random_geometry(3, 5, seed=1)
        z = np.random.default_rng(1).normal(size=5)
        predicted = int(np.argmax(logits_at(geometry, z)))
        shifted = shift_along_manifold(geometry, z, predicted, np.zeros(3))
        np.testing.assert_allclose(shifted.point, z, atol=1e-12)
        assert shifted.in_region

    @settings(max_examples=50)
    @seed(21)
    @given(st.integers(0, 10_000), st.floats(-2.0, 2.0), st.floats(0.0, 2.0))
    def test_non_me_is_preserved(self, geometry_seed: int, common: float, lead: float) -> None:
        geometry = random_geometry(4, 6, geometry_seed)
        z = np.random.default_rng(geometry_seed).normal(size=6)
        logits = logits_at(geometry, z)
        predicted = int(np.argmax(logits))
        delta = np.full(4, common)
        delta[predicted] += lead
        shifted = shift_along_manifold(geometry, z, predicted, delta)
        assert shifted.residual < 1e-9
        assert non_me_of_logits(logits_at(geometry, shifted.point)) == pytest.approx(
            non_me_of_logits(logits), abs=1e-9
        )

    def test_unequal_offsets(self) -> None:
        geometry = random_geometry(3, 5, seed=2)
        with pytest.raises(ValueError, match="equal"):
            shift_along_manifold(geometry, np.zeros(5), 0, [0.0, 1.0, 2.0])

    def test_infeasible(self) -> None:
        """Four logits cannot be moved independently from a two-dimensional hidden space."""
        geometry = random_geometry(4, 2, seed=3)
        with pytest.raises(InfeasibleGeometryError):
            shift_along_manifold(geometry, np.zeros(2), 0, [3.0, -1.0, -1.0, -1.0])

    def test_leaving_the_region_is_flagged(self) -> None:
        geometry = SoftmaxGeometry(np.eye(3), np.zeros(3))
        shifted = shift_along_manifold(geometry, [1.0, 0.0, 0.0], 0, [-2.0, 0.0, 0.0])
        assert not shifted.in_region


# ============================================================================
# Non-ME extremes and the boundary bound
# ============================================================================


class TestLemma:
    def test_equal_non_max_logits(self) -> None:
        assert non_me_of_logits(np.array([4.0, 1.0, 1.0])) == pytest.approx(math.log(2), abs=1e-12)

    def test_unequal_non_max_logits(self) -> None:
        assert non_me_of_logits(np.array([4.0, 1.0, 1.5])) < math.log(2)

    @pytest.mark.parametrize("num_classes", [2, 3, 10])
    def test_random_geometries(self, num_classes: int) -> None:
        report = verify_lemma1(random_geometry(num_classes, num_classes + 2, seed=num_classes), 200, seed=5)
        assert report.passed
        assert report.checked == 200

    def test_trials_must_be_positive(self) -> None:
        with pytest.raises(ValueError, match="trials"):
            verify_lemma1(random_geometry(3, 5, seed=0), 0)


class TestBoundary:
    """Confidence on the decision boundary."""

    def test_equal_logits(self) -> None:
        assert softmax_of(np.zeros(10)).max() == pytest.approx(0.1, abs=1e-12)

    def test_bound_at_equal_gaps(self) -> None:
        assert boundary_confidence_bound([5.0, 1.0, 1.0], 0) == pytest.approx(1 / 3)

    def test_bound_with_gap(self) -> None:
        assert boundary_confidence_bound([5.0, 1.0, 0.0], 0) == pytest.approx(1 / (2 + math.exp(-1)))

    def test_tie_at_bound_passes(self) -> None:
        bound = boundary_confidence_bound([5.0, 1.0, 0.0], 0)
        assert confidence_respects_bound([1.0, 1.0, 0.0], 0, bound)

    def test_leading_point_rises_above_bound(self) -> None:
        bound = boundary_confidence_bound([5.0, 1.0, 0.0], 0)
        assert confidence_respects_bound([1.5, 1.0, 0.0], 0, bound)
        assert not confidence_respects_bound([1.5, 1.0, 0.0], 0, 0.9)

    def test_tie_above_bound_fails(self) -> None:
        assert not confidence_respects_bound([1.0, 1.0, 0.0], 0, 0.25)

    def test_equal_logit_point(self) -> None:
        geometry = random_geometry(5, 7, seed=4)
        np.testing.assert_allclose(logits_at(geometry, equal_logit_point(geometry)), np.zeros(5), atol=1e-9)

    @pytest.mark.parametrize("num_classes", [2, 3, 10])
    def test_random_geometries(self, num_classes: int) -> None:
        report = verify_theorem1_boundary(random_geometry(num_classes, num_classes + 2, seed=num_classes), 20, seed=6)
        assert report.passed
        assert report.checked + report.skipped == 20

    def test_infeasible_geometry_is_skipped(self) -> None:
        report = verify_theorem1_boundary(random_geometry(4, 2, seed=3))
        assert report.passed
        assert report.skipped == 1
        assert report.notes


# ============================================================================
# Reverse-training bounds
# ============================================================================


class TestReverseBounds:
    def test_direct_values(self) -> None:
        bounds = reverse_bounds([-10.0, 0.0, 0.0], 0)
        assert bounds.alpha == pytest.approx(2.26995e-5, rel=1e-4)
        assert bounds.confidence_gap == pytest.approx(9.07934e-5, rel=1e-4)
        assert bounds.confidence_bound == pytest.approx(4 * bounds.alpha)
        assert bounds.premise
        assert bounds.holds

    def test_two_classes(self) -> None:
        bounds = reverse_bounds([-8.0, 0.0], 0)
        assert bounds.spread == 0.0
        assert bounds.holds

    def test_premise_rejects_far_logits(self) -> None:
        assert not reverse_bounds([0.0, 0.0, 0.0], 0).premise

    @pytest.mark.parametrize("class_counts", [(2,), (3,), (10,)])
    def test_random_samples(self, class_counts: tuple[int, ...]) -> None:
        report = verify_theorem2(500, class_counts, seed=7)
        assert report.passed
        assert report.checked == 500


class TestSuite:
    def test_small_suite(self) -> None:
        reports = verify_suite(geometries=30, theorem2_trials=50, seed=1)
        assert [report.name for report in reports] == ["lemma1", "theorem1", "theorem2"]
        assert all(report.passed for report in reports)
        assert reports[0].checked + reports[0].skipped == 30
