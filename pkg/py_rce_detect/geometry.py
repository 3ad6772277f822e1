"""Numeric checks of the softmax decision geometry behind non-ME and reverse training."""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Final

import numpy as np
import numpy.typing as npt

from py_rce_detect import ops
from py_rce_detect.detectors import non_me_metric
from py_rce_detect.exception import InfeasibleGeometryError, ShapeError
from py_rce_detect.tensor import Array, Tensor

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE: Final = 1e-9
VALUE_TOLERANCE: Final = 1e-9
GRID_TOLERANCE: Final = 1e-6
DISTINCT_LOGITS: Final = 1e-6
GRID_POINTS: Final = 101
GRID_SPAN: Final = 3.0
OFF_BOUNDARY_MARGIN: Final = 0.5


@dataclass(frozen=True, slots=True)
class SoftmaxGeometry:
    weights: Array  # W_s, L×m
    bias: Array  # b_s, L

    def __post_init__(self) -> None:
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):  # noqa: PLR2004
            msg = f"Weights {self.weights.shape} and bias {self.bias.shape} do not describe an L×m layer."
            raise ShapeError(msg)
        rows = self.weights.shape[0]
        for i in range(rows):
            for j in range(i + 1, rows):
                if np.array_equal(self.weights[i], self.weights[j]):
                    msg = f"Rows {i} and {j} of W_s coincide; their decision boundary is degenerate."
                    raise ValueError(msg)

    @property
    def num_classes(self) -> int:
        return int(self.weights.shape[0])

    @property
    def hidden_dim(self) -> int:
        return int(self.weights.shape[1])


@dataclass(frozen=True, slots=True)
class ManifoldShift:
    point: Array
    residual: float
    in_region: bool  # still inside the closed decision region of the original class


@dataclass(frozen=True, slots=True)
class VerificationReport:
    name: str
    passed: bool
    checked: int
    skipped: int = 0
    witness: dict[str, Any] | None = None
    notes: tuple[str, ...] = field(default_factory=tuple)


def random_geometry(num_classes: int, hidden_dim: int, seed: int) -> SoftmaxGeometry:
    rng = np.random.default_rng(seed)
    return SoftmaxGeometry(rng.normal(size=(num_classes, hidden_dim)), rng.normal(size=num_classes))


def logits_at(geometry: SoftmaxGeometry, z: npt.ArrayLike) -> Array:
    point = np.asarray(z, dtype=np.float64)
    if point.shape != (geometry.hidden_dim,):
        msg = f"Hidden vector has shape {point.shape}, geometry expects ({geometry.hidden_dim},)."
        raise ShapeError(msg)
    product = ops.matmul(Tensor(geometry.weights), Tensor(point[:, np.newaxis]))
    return product.data[:, 0] + geometry.bias


def softmax_of(logits: Array) -> Array:
    return ops.softmax(Tensor(logits)).data


def non_me_of_logits(logits: Array) -> float:
    return non_me_metric(softmax_of(logits))


def shift_along_manifold(
    geometry: SoftmaxGeometry, z: npt.ArrayLike, predicted: int, delta: npt.ArrayLike
) -> ManifoldShift:
    """Move `z` so that its logits change by `delta`, which must be equal on every class but `predicted`."""
    offsets = np.asarray(delta, dtype=np.float64)
    if offsets.shape != (geometry.num_classes,):
        msg = f"Offsets have shape {offsets.shape}, expected ({geometry.num_classes},)."
        raise ShapeError(msg)
    others = np.delete(offsets, predicted)
    if others.size and not np.all(others == others[0]):
        raise ValueError("Offsets must be equal on every class but the predicted one.")
    step, residual = _solve(geometry, offsets)
    moved = np.asarray(z, dtype=np.float64) + step
    logits = logits_at(geometry, moved)
    in_region = bool(logits[predicted] >= np.delete(logits, predicted).max() - VALUE_TOLERANCE)
    return ManifoldShift(moved, residual, in_region)


def equal_logit_point(geometry: SoftmaxGeometry) -> Array:
    """A hidden vector at which every logit is zero."""
    point, _ = _solve(geometry, -geometry.bias)
    return point


def _solve(geometry: SoftmaxGeometry, offsets: Array) -> tuple[Array, float]:
    step, *_ = np.linalg.lstsq(geometry.weights, offsets, rcond=None)
    residual = float(np.linalg.norm(geometry.weights @ step - offsets))
    if residual >= RESIDUAL_TOLERANCE:
        msg = f"No hidden vector realizes the requested logits (residual {residual:.3g})."
        raise InfeasibleGeometryError(msg)
    return step, residual


def boundary_confidence_bound(logits: npt.ArrayLike, predicted: int) -> float:
    """max F(z)_ŷ over boundary points with the non-maximal logit gaps of `logits`: 1/(2 + Σ exp(C_ik))."""
    z = np.asarray(logits, dtype=np.float64)
    rest = np.delete(z, predicted)
    leader = int(np.argmax(rest))
    gaps = np.delete(rest, leader) - rest[leader]
    return float(1.0 / (2.0 + np.exp(gaps).sum()))


def confidence_respects_bound(logits: npt.ArrayLike, predicted: int, bound: float) -> bool:
    """F(z)_ŷ stays at or below `bound` where ŷ ties the runner-up and rises above it where ŷ leads."""
    z = np.asarray(logits, dtype=np.float64)
    confidence = float(softmax_of(z)[predicted])
    lead = float(z[predicted] - np.delete(z, predicted).max())
    if lead <= DISTINCT_LOGITS:
        return confidence <= bound + GRID_TOLERANCE
    return confidence > bound


# ============================================================================
# Lemma: non-ME is constant on the manifold and maximal at equal non-max logits
# ============================================================================


def verify_lemma1(geometry: SoftmaxGeometry, trials: int, seed: int = 0) -> VerificationReport:
    if trials < 1:
        raise ValueError("trials must be at least 1.")
    rng = np.random.default_rng(seed)
    num_classes = geometry.num_classes
    ceiling = math.log(num_classes - 1) if num_classes > 2 else 0.0  # noqa: PLR2004
    checked = skipped = 0
    for _ in range(trials):
        z = rng.normal(size=geometry.hidden_dim)
        logits = logits_at(geometry, z)
        predicted = int(np.argmax(logits))
        base = non_me_of_logits(logits)

        delta = np.full(num_classes, rng.normal())
        delta[predicted] += abs(rng.normal())
        try:
            shifted = shift_along_manifold(geometry, z, predicted, delta)
        except InfeasibleGeometryError:
            skipped += 1
            continue
        if shifted.in_region:
            moved = non_me_of_logits(logits_at(geometry, shifted.point))
            if abs(moved - base) > VALUE_TOLERANCE:
                return _fail("lemma1", checked, skipped, {"z": z, "delta": delta, "before": base, "after": moved})

        rest = np.delete(logits, predicted)
        flat = logits.copy()
        flat[np.arange(num_classes) != predicted] = rest.max()
        peak = non_me_of_logits(flat)
        if abs(peak - ceiling) > VALUE_TOLERANCE:
            return _fail("lemma1", checked, skipped, {"logits": flat, "non_me": peak, "ceiling": ceiling})

        if rest.size > 1 and np.ptp(rest) > DISTINCT_LOGITS and not base < ceiling:
            return _fail("lemma1", checked, skipped, {"logits": logits, "non_me": base, "ceiling": ceiling})
        checked += 1
    return VerificationReport("lemma1", True, checked, skipped)


# ============================================================================
# Theorem: boundary confidence bound and its 1/L minimum
# ============================================================================


def verify_theorem1_boundary(geometry: SoftmaxGeometry, trials: int = 1, seed: int = 0) -> VerificationReport:
    num_classes = geometry.num_classes
    try:
        centre = equal_logit_point(geometry)
    except InfeasibleGeometryError:
        return VerificationReport("theorem1", True, 0, 1, notes=("no point with all logits equal; skipped",))
    equal_logits = logits_at(geometry, centre)
    top = float(softmax_of(equal_logits).max())
    if abs(top - 1.0 / num_classes) > VALUE_TOLERANCE:
        return _fail("theorem1", 0, 0, {"logits": equal_logits, "confidence": top})

    rng = np.random.default_rng(seed)
    grid = np.linspace(-GRID_SPAN, GRID_SPAN, GRID_POINTS)
    checked = skipped = 0
    for _ in range(trials):
        z = rng.normal(size=geometry.hidden_dim)
        logits = logits_at(geometry, z)
        predicted = int(np.argmax(logits))
        bound = boundary_confidence_bound(logits, predicted)
        if bound < 1.0 / num_classes - VALUE_TOLERANCE:
            return _fail("theorem1", checked, skipped, {"logits": logits, "bound": bound})

        # Walk the boundary and a parallel line inside the predicted region; other gaps stay fixed.
        runner_up = float(np.delete(logits, predicted).max())
        best = -math.inf
        for level in grid:
            delta = np.full(num_classes, level - runner_up)
            delta[predicted] = level - logits[predicted]
            try:
                shifted = shift_along_manifold(geometry, z, predicted, delta)
            except InfeasibleGeometryError:
                break
            on_boundary = logits_at(geometry, shifted.point)
            delta[predicted] += OFF_BOUNDARY_MARGIN
            try:
                inside = logits_at(geometry, shift_along_manifold(geometry, z, predicted, delta).point)
            except InfeasibleGeometryError:
                break
            for point in (on_boundary, inside):
                if not confidence_respects_bound(point, predicted, bound):
                    return _fail("theorem1", checked, skipped, {"logits": point, "bound": bound})
            best = max(best, float(softmax_of(on_boundary)[predicted]))
        if not math.isfinite(best):
            skipped += 1
            continue
        if abs(best - bound) > GRID_TOLERANCE:
            return _fail("theorem1", checked, skipped, {"logits": logits, "bound": bound, "grid_max": best})
        checked += 1
    return VerificationReport("theorem1", True, checked, skipped)


# ============================================================================
# Theorem: reverse-training bounds
# ============================================================================


@dataclass(frozen=True, slots=True)
class ReverseBounds:
    alpha: float  # ‖softmax(Z) - R_y‖∞
    premise: bool  # alpha <= 0.5/L
    confidence_gap: float  # ‖softmax(-Z) - 1_y‖∞
    confidence_bound: float  # alpha (L-1)²
    spread: float  # max over j, k != y of |softmax(-Z)_j - softmax(-Z)_k|
    spread_bound: float  # 2 alpha² (L-1)²

    @property
    def holds(self) -> bool:
        return (
            self.confidence_gap <= self.confidence_bound + VALUE_TOLERANCE
            and self.spread <= self.spread_bound + VALUE_TOLERANCE
        )


def reverse_bounds(logits: npt.ArrayLike, label: int) -> ReverseBounds:
    z = np.asarray(logits, dtype=np.float64)
    num_classes = z.shape[0]
    reverse = np.full(num_classes, 1.0 / (num_classes - 1))
    reverse[label] = 0.0
    onehot = np.zeros(num_classes)
    onehot[label] = 1.0
    alpha = float(np.abs(softmax_of(z) - reverse).max())
    flipped = softmax_of(-z)
    rest = np.delete(flipped, label)
    return ReverseBounds(
        alpha=alpha,
        premise=alpha <= 0.5 / num_classes,
        confidence_gap=float(np.abs(flipped - onehot).max()),
        confidence_bound=alpha * (num_classes - 1) ** 2,
        spread=float(rest.max() - rest.min()),
        spread_bound=2.0 * alpha**2 * (num_classes - 1) ** 2,
    )


def _reverse_trained_logits(rng: np.random.Generator, num_classes: int) -> tuple[Array, int]:
    # Logits of a reverse-trained model: the true class sits far below near-equal others.
    label = int(rng.integers(num_classes))
    z = rng.normal(0.0, 10.0 ** rng.uniform(-4.0, 0.0), size=num_classes)
    z[label] = -rng.uniform(0.0, 30.0)
    return z + rng.normal(), label


def verify_theorem2(trials: int, class_counts: Sequence[int] = (2, 3, 10), seed: int = 0) -> VerificationReport:
    if trials < 1:
        raise ValueError("trials must be at least 1.")
    rng = np.random.default_rng(seed)
    checked = 0
    for num_classes in class_counts:
        accepted = attempts = 0
        while accepted < trials:
            attempts += 1
            if attempts > 100 * trials:
                return _fail(
                    "theorem2",
                    checked,
                    0,
                    {"num_classes": num_classes, "accepted": accepted, "reason": "premise rarely satisfied"},
                )
            logits, label = _reverse_trained_logits(rng, num_classes)
            bounds = reverse_bounds(logits, label)
            if not bounds.premise:
                continue
            accepted += 1
            checked += 1
            if not bounds.holds:
                return _fail("theorem2", checked, 0, {"logits": logits, "label": label, "bounds": bounds})
    return VerificationReport("theorem2", True, checked)


def verify_suite(
    geometries: int = 1000,
    theorem2_trials: int = 10_000,
    class_counts: Sequence[int] = (2, 3, 10),
    seed: int = 0,
) -> list[VerificationReport]:
    """Lemma and boundary checks over random geometries, then the reverse-training bounds."""
    lemma = boundary = None
    lemma_checked = lemma_skipped = boundary_checked = boundary_skipped = 0
    seeds = np.random.SeedSequence(seed).generate_state(geometries)
    for index, geometry_seed in enumerate(seeds):
        num_classes = int(class_counts[index % len(class_counts)])
        geometry = random_geometry(num_classes, num_classes + 2, int(geometry_seed))
        report = verify_lemma1(geometry, 1, int(geometry_seed))
        lemma_checked += report.checked
        lemma_skipped += report.skipped
        if not report.passed and lemma is None:
            lemma = report
        report = verify_theorem1_boundary(geometry, 1, int(geometry_seed))
        boundary_checked += report.checked
        boundary_skipped += report.skipped
        if not report.passed and boundary is None:
            boundary = report
    reports = [
        lemma or VerificationReport("lemma1", True, lemma_checked, lemma_skipped),
        boundary or VerificationReport("theorem1", True, boundary_checked, boundary_skipped),
        verify_theorem2(theorem2_trials, class_counts, seed),
    ]
    for report in reports:
        logger.info(
            "%s: %s (%d checked, %d skipped)",
            report.name,
            "pass" if report.passed else "FAIL",
            report.checked,
            report.skipped,
        )
    return reports


def _fail(name: str, checked: int, skipped: int, witness: dict[str, Any]) -> VerificationReport:
    logger.warning("%s violated: %s", name, witness)
    return VerificationReport(name, False, checked, skipped, witness)
