"""Adversarial attacks on a frozen model. Each attack takes an N×C×H×W batch and returns one result per input."""

import dataclasses
import logging
import math
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import StrEnum
from typing import Final

import numpy as np
import numpy.typing as npt

from py_rce_detect import ops
from py_rce_detect.classifier import infer
from py_rce_detect.datasets import PIXEL_MAX, PIXEL_MIN, clip_domain
from py_rce_detect.detectors import DetectorState, Metric
from py_rce_detect.exception import DetectorError, NumericError
from py_rce_detect.losses import objective_loss, per_sample_loss
from py_rce_detect.network import NetworkModel
from py_rce_detect.optim import AdamState
from py_rce_detect.tensor import Array, Tape, Tensor, backward

logger = logging.getLogger(__name__)

HIGH_CONFIDENCE_KAPPA: Final = 10.0
TANH_SHRINK: Final = 0.999999
ABORT_TOLERANCE: Final = 1e-4
UNBOUNDED_C: Final = 1e10


class AttackFamily(StrEnum):
    FGSM = "fgsm"
    BIM = "bim"
    ILCM = "ilcm"
    JSMA = "jsma"
    CW = "cw"
    CW_HC = "cw_hc"
    CW_WB = "cw_wb"
    RAND = "rand"

    @property
    def targeted(self) -> bool:
        return self in {AttackFamily.JSMA, AttackFamily.CW, AttackFamily.CW_HC, AttackFamily.CW_WB}

    @property
    def epsilon_bounded(self) -> bool:
        return self in {AttackFamily.FGSM, AttackFamily.BIM, AttackFamily.ILCM, AttackFamily.RAND}

    @property
    def sweeps_epsilon(self) -> bool:
        """Has a perturbation size an accuracy curve can sweep; for JSMA it is the per-pixel offset."""
        return self.epsilon_bounded or self is AttackFamily.JSMA


@dataclass(frozen=True, slots=True)
class AttackConfig:
    family: AttackFamily
    epsilon: float = 0.1
    iterations: int = 10  # r for BIM/ILCM
    kappa: float | None = None  # None: 10 for CW_HC, 0 otherwise
    step_size: float = 0.01
    search_rounds: int = 9
    initial_c: float = 0.01
    max_iterations: int = 10000
    abort_early: bool = True
    jsma_offset: float = 1.0
    max_pixels: int = 100
    eta: float | None = None  # CW_WB; falls back to the detector's eta
    seed: int = 0
    chunk_size: int = 16

    def __post_init__(self) -> None:
        errors = []
        if self.epsilon < 0:
            errors.append(f"epsilon must be non-negative, got {self.epsilon}")
        if self.iterations < 1:
            errors.append(f"iterations must be at least 1, got {self.iterations}")
        if self.kappa is not None and self.kappa < 0:
            errors.append(f"kappa must be non-negative, got {self.kappa}")
        if self.search_rounds < 1:
            errors.append(f"search_rounds must be at least 1, got {self.search_rounds}")
        if self.max_iterations < 1:
            errors.append(f"max_iterations must be at least 1, got {self.max_iterations}")
        if self.step_size <= 0 or self.initial_c <= 0:
            errors.append("step_size and initial_c must be positive")
        if self.max_pixels < 1:
            errors.append(f"max_pixels must be at least 1, got {self.max_pixels}")
        if self.chunk_size < 1:
            errors.append(f"chunk_size must be at least 1, got {self.chunk_size}")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def confidence_margin(self) -> float:
        if self.kappa is not None:
            return self.kappa
        return HIGH_CONFIDENCE_KAPPA if self.family is AttackFamily.CW_HC else 0.0


@dataclass(frozen=True, slots=True)
class AttackResult:
    adversarial: Array  # C×H×W
    success: bool
    iterations: int
    objective: float
    f2: float | None = None
    target: int | None = None
    const: float | None = None  # C&W constant of the reported point


@dataclass(frozen=True, slots=True)
class AttackRun:
    family: AttackFamily
    results: tuple[AttackResult, ...]
    labels: npt.NDArray[np.int64]
    targets: npt.NDArray[np.int64]  # -1 where the family is untargeted

    def __len__(self) -> int:
        return len(self.results)

    @property
    def adversarial(self) -> Array:
        return np.stack([result.adversarial for result in self.results])

    @property
    def success(self) -> npt.NDArray[np.bool_]:
        return np.array([result.success for result in self.results], dtype=bool)


def clip_ball(x_adv: Array, x: Array, epsilon: float) -> Array:
    """Project onto the L∞ ball of radius `epsilon` around `x`, intersected with the pixel domain."""
    return clip_domain(np.clip(x_adv, x - epsilon, x + epsilon))


def choose_targets(labels: npt.NDArray[np.int64], num_classes: int, seed: int) -> npt.NDArray[np.int64]:
    """A seeded target t != y for every label."""
    offsets = np.random.default_rng(seed).integers(1, num_classes, size=labels.shape[0])
    return ((labels + offsets) % num_classes).astype(np.int64)


def least_likely_label(probs: npt.ArrayLike) -> int:
    return int(np.argmin(np.asarray(probs, dtype=np.float64)))


def _check_finite(grad: Array, family: str) -> Array:
    if not np.all(np.isfinite(grad)):
        msg = f"{family}: non-finite input gradient."
        raise NumericError(msg)
    return grad


def _loss_gradient(model: NetworkModel, images: Array, labels: npt.NDArray[np.int64]) -> Array:
    """∇_x of the model's training loss, row by row."""
    with Tape() as tape:
        inputs = Tensor(images)
        loss = objective_loss(model.objective, model.forward(inputs).logits, labels)
    # The loss is a batch mean; rescaling does not change any sign.
    return backward(tape, loss)[inputs] * images.shape[0]


def _finish(
    model: NetworkModel,
    adversarial: Array,
    loss_labels: npt.NDArray[np.int64],
    iterations: int,
    targets: npt.NDArray[np.int64] | None = None,
) -> list[AttackResult]:
    outputs = infer(model, adversarial)
    losses = per_sample_loss(model.objective, outputs.logits, loss_labels)
    hits = outputs.labels == targets if targets is not None else outputs.labels != loss_labels
    return [
        AttackResult(
            adversarial[i],
            bool(hits[i]),
            iterations,
            float(losses[i]),
            target=None if targets is None else int(targets[i]),
        )
        for i in range(adversarial.shape[0])
    ]


# ============================================================================
# Gradient-sign attacks
# ============================================================================


def fgsm(model: NetworkModel, images: Array, labels: npt.NDArray[np.int64], epsilon: float) -> list[AttackResult]:
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative.")
    grad = _check_finite(_loss_gradient(model, images, labels), "FGSM")
    return _finish(model, clip_domain(images + epsilon * np.sign(grad)), labels, 1)


def bim(
    model: NetworkModel, images: Array, labels: npt.NDArray[np.int64], epsilon: float, iterations: int
) -> list[AttackResult]:
    if epsilon < 0 or iterations < 1:
        raise ValueError("BIM needs epsilon >= 0 and at least one iteration.")
    step = epsilon / iterations
    adversarial = images.copy()
    for _ in range(iterations):
        grad = _check_finite(_loss_gradient(model, adversarial, labels), "BIM")
        adversarial = clip_ball(adversarial + step * np.sign(grad), images, epsilon)
    return _finish(model, adversarial, labels, iterations)


def ilcm(model: NetworkModel, images: Array, epsilon: float, iterations: int) -> list[AttackResult]:
    """Iterative descent toward the least likely class of the clean input."""
    if epsilon < 0 or iterations < 1:
        raise ValueError("ILCM needs epsilon >= 0 and at least one iteration.")
    least_likely = np.argmin(infer(model, images).probs, axis=1).astype(np.int64)
    step = epsilon / iterations
    adversarial = images.copy()
    for _ in range(iterations):
        grad = _check_finite(_loss_gradient(model, adversarial, least_likely), "ILCM")
        adversarial = clip_ball(adversarial - step * np.sign(grad), images, epsilon)
    return _finish(model, adversarial, least_likely, iterations, targets=least_likely)


def uniform_noise(images: Array, epsilon: float, seed: int) -> Array:
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative.")
    rng = np.random.default_rng(seed)
    return clip_domain(images + rng.uniform(-epsilon, epsilon, size=images.shape))


def rand_noise(
    model: NetworkModel, images: Array, labels: npt.NDArray[np.int64], epsilon: float, seed: int
) -> list[AttackResult]:
    return _finish(model, uniform_noise(images, epsilon, seed), labels, 1)


# ============================================================================
# JSMA
# ============================================================================


def saliency(grad_target: Array, grad_others: Array) -> Array:
    """S[i] = 0 if ∂F_t/∂x_i < 0 or Σ_{j≠t} ∂F_j/∂x_i > 0, else ∂F_t/∂x_i · |Σ_{j≠t} ∂F_j/∂x_i|."""
    return np.where((grad_target < 0) | (grad_others > 0), 0.0, grad_target * np.abs(grad_others))


def _probability_gradients(
    model: NetworkModel, images: Array, targets: npt.NDArray[np.int64]
) -> tuple[Array, Array, npt.NDArray[np.int64]]:
    """Input gradients of F_t and Σ_{j≠t} F_j, F being the softmax the model predicts with."""
    with Tape() as tape:
        inputs = Tensor(images)
        probs = ops.softmax(model.prediction_logits(model.forward(inputs)))
        target_sum = ops.sum_(ops.take(probs, targets))
        others_sum = ops.sub(ops.sum_(probs), target_sum)
    grad_target = backward(tape, target_sum)[inputs]
    grad_others = backward(tape, others_sum)[inputs]
    predicted = np.argmax(probs.data, axis=1).astype(np.int64)
    return _check_finite(grad_target, "JSMA"), _check_finite(grad_others, "JSMA"), predicted


def jsma(
    model: NetworkModel,
    images: Array,
    targets: npt.NDArray[np.int64],
    offset: float = 1.0,
    max_pixels: int = 100,
) -> list[AttackResult]:
    """Greedy single-feature saliency attack; saturated or already changed features leave the search domain."""
    if max_pixels < 1:
        raise ValueError("max_pixels must be at least 1.")
    count = images.shape[0]
    adversarial = images.copy().reshape(count, -1)
    used = np.zeros(adversarial.shape, dtype=bool)
    changed = np.zeros(count, dtype=np.int64)
    done = np.zeros(count, dtype=bool)
    failed = np.zeros(count, dtype=bool)

    while True:
        active = np.flatnonzero(~done & ~failed)
        if active.size == 0:
            break
        grad_target, grad_others, predicted = _probability_gradients(
            model, adversarial[active].reshape(-1, *images.shape[1:]), targets[active]
        )
        for row, k in enumerate(active):
            if predicted[row] == targets[k]:
                done[k] = True
                continue
            if changed[k] >= max_pixels or offset == 0:
                failed[k] = True
                continue
            scores = saliency(grad_target[row].ravel(), grad_others[row].ravel())
            movable = adversarial[k] < PIXEL_MAX if offset > 0 else adversarial[k] > PIXEL_MIN
            scores[~movable | used[k]] = 0.0
            if scores.max() <= 0:
                failed[k] = True
                continue
            pixel = int(np.argmax(scores))
            adversarial[k, pixel] = np.clip(adversarial[k, pixel] + offset, PIXEL_MIN, PIXEL_MAX)
            used[k, pixel] = True
            changed[k] += 1

    perturbed = adversarial.reshape(images.shape)
    probs = infer(model, perturbed).probs
    return [
        AttackResult(
            perturbed[k],
            bool(done[k]),
            int(changed[k]),
            float(probs[k, targets[k]]),
            target=int(targets[k]),
        )
        for k in range(count)
    ]


# ============================================================================
# Carlini & Wagner family
# ============================================================================


def tanh_to_pixels(omega: Array) -> Array:
    return 0.5 * np.tanh(omega)


def pixels_to_tanh(x: Array) -> Array:
    return np.arctanh(2.0 * np.asarray(x, dtype=np.float64) * TANH_SHRINK)


@dataclass(frozen=True, slots=True)
class _DensityTerm:
    """Target-class K-density in a form the tape can differentiate."""

    bank_t: Array  # m×T, every class bank stacked
    bank_sq: Array  # 1×T
    mask: Array  # N×T, 0 on the target's bank and -inf elsewhere
    log_counts: Array  # N
    sigma2: float
    eta: float

    @classmethod
    def build(cls, state: DetectorState, targets: npt.NDArray[np.int64], eta: float) -> "_DensityTerm":
        labels = sorted(state.banks)
        bank = np.concatenate([state.bank(label) for label in labels])
        owner = np.concatenate([np.full(state.banks[label].shape[0], label) for label in labels])
        mask = np.where(owner[np.newaxis, :] == targets[:, np.newaxis], 0.0, -np.inf)
        log_counts = np.log([state.bank(int(t)).shape[0] for t in targets])
        return cls(bank.T.copy(), np.square(bank).sum(axis=1)[np.newaxis, :], mask, log_counts, state.sigma2, eta)

    def hinge(self, hidden: Tensor) -> Tensor:
        """f₂ = max(-log KD - eta, 0) per row."""
        norms = ops.reshape(ops.sum_(ops.square(hidden), axis=1), (hidden.shape[0], 1))
        dist2 = ops.add(ops.sub(norms, ops.scale(ops.matmul(hidden, Tensor(self.bank_t)), 2.0)), Tensor(self.bank_sq))
        exponents = ops.add(ops.scale(dist2, -1.0 / self.sigma2), Tensor(self.mask))
        log_kd = ops.sub(ops.logsumexp(exponents), Tensor(self.log_counts))
        return ops.leaky_relu(ops.shift(ops.neg(log_kd), -self.eta), 0.0)


@dataclass(frozen=True, slots=True)
class _CwStep:
    loss: Tensor
    total: float
    adversarial: Array
    l2: Array
    f: Array
    f2: Array | None
    predicted: npt.NDArray[np.int64]


def _cw_step(
    model: NetworkModel,
    omega: Tensor,
    images: Array,
    targets: npt.NDArray[np.int64],
    consts: Array,
    kappa: float,
    density: _DensityTerm | None,
) -> _CwStep:
    count = images.shape[0]
    adversarial = ops.scale(ops.tanh(omega), 0.5)
    l2 = ops.sum_(ops.reshape(ops.square(ops.sub(adversarial, Tensor(images))), (count, -1)), axis=1)
    forward = model.forward(adversarial)
    logits = model.prediction_logits(forward)
    gap = ops.sub(ops.max_except(logits, targets), ops.take(logits, targets))
    f = ops.shift(ops.leaky_relu(ops.shift(gap, kappa), 0.0), -kappa)
    f2 = density.hinge(forward.hidden) if density is not None else None
    penalty = ops.add(f, f2) if f2 is not None else f
    loss = ops.sum_(ops.add(l2, ops.mul(Tensor(consts), penalty)))
    return _CwStep(
        loss,
        loss.item(),
        adversarial.data,
        l2.data,
        f.data,
        None if f2 is None else f2.data,
        np.argmax(logits.data, axis=1).astype(np.int64),
    )


def _carlini_wagner(
    model: NetworkModel,
    images: Array,
    targets: npt.NDArray[np.int64],
    config: AttackConfig,
    density: _DensityTerm | None,
) -> list[AttackResult]:
    count = images.shape[0]
    kappa = config.confidence_margin
    omega_start = pixels_to_tanh(images)
    consts = np.full(count, config.initial_c)
    lower = np.zeros(count)
    upper = np.full(count, UNBOUNDED_C)

    best_l2 = np.full(count, np.inf)
    best_adv = images.copy()
    best_objective = np.full(count, np.nan)
    best_f2 = np.full(count, np.nan)
    best_const = np.full(count, np.nan)
    last_adv = images.copy()
    last_objective = np.full(count, np.nan)
    last_f2 = np.full(count, np.nan)
    iterations = np.zeros(count, dtype=np.int64)
    check_every = max(1, config.max_iterations // 10)

    for _ in range(config.search_rounds):
        omega = omega_start.copy()
        adam = AdamState(config.step_size)
        round_success = np.zeros(count, dtype=bool)
        previous = math.inf
        for it in range(config.max_iterations + 1):
            with Tape() as tape:
                w = Tensor(omega)
                step = _cw_step(model, w, images, targets, consts, kappa, density)
            penalty = step.f if step.f2 is None else step.f + step.f2
            objective = step.l2 + consts * penalty
            # f bottoms out at -kappa exactly when the target leads every other logit by kappa.
            ok = (step.predicted == targets) & (step.f <= -kappa)
            better = ok & (step.l2 < best_l2)
            best_l2[better] = step.l2[better]
            best_adv[better] = step.adversarial[better]
            best_objective[better] = objective[better]
            best_const[better] = consts[better]
            if step.f2 is not None:
                best_f2[better] = step.f2[better]
            round_success |= ok
            last_adv, last_objective = step.adversarial, objective
            if step.f2 is not None:
                last_f2 = step.f2
            if it == config.max_iterations:
                break
            if config.abort_early and (it + 1) % check_every == 0:
                if step.total > previous * (1.0 - ABORT_TOLERANCE):
                    break
                previous = step.total
            grad = _check_finite(backward(tape, step.loss)[w], "C&W")
            omega = adam.update(omega, grad)
            iterations += 1

        # Grow c tenfold until the first success, then bisect.
        upper = np.where(round_success, np.minimum(upper, consts), upper)
        lower = np.where(round_success, lower, np.maximum(lower, consts))
        bracketed = upper < UNBOUNDED_C
        consts = np.where(bracketed, (lower + upper) / 2.0, consts * 10.0)

    success = np.isfinite(best_l2)
    has_f2 = density is not None
    results = []
    for k in range(count):
        if success[k]:
            adv, obj, f2 = best_adv[k], best_objective[k], best_f2[k]
        else:
            adv, obj, f2 = last_adv[k], last_objective[k], last_f2[k]
        results.append(
            AttackResult(
                adv.copy(),
                bool(success[k]),
                int(iterations[k]),
                float(obj),
                f2=float(f2) if has_f2 else None,
                target=int(targets[k]),
                const=float(best_const[k]) if success[k] else None,
            )
        )
    return results


def cw(model: NetworkModel, images: Array, targets: npt.NDArray[np.int64], config: AttackConfig) -> list[AttackResult]:
    return _carlini_wagner(model, images, targets, config, None)


def cw_hc(
    model: NetworkModel, images: Array, targets: npt.NDArray[np.int64], config: AttackConfig
) -> list[AttackResult]:
    kappa = HIGH_CONFIDENCE_KAPPA if config.kappa is None else config.kappa
    return _carlini_wagner(model, images, targets, dataclasses.replace(config, kappa=kappa), None)


def cw_wb(
    model: NetworkModel,
    detector: DetectorState,
    images: Array,
    targets: npt.NDArray[np.int64],
    config: AttackConfig,
) -> list[AttackResult]:
    """C&W with the K-density hinge f₂ added to the penalty."""
    if detector.metric is not Metric.KDENSITY or not detector.banks:
        raise DetectorError("The white-box attack needs a fitted K-density detector.")
    eta = config.eta if config.eta is not None else detector.eta
    if eta is None:
        raise DetectorError("The white-box attack needs eta; fit it with kdensity_eta first.")
    return _carlini_wagner(model, images, targets, config, _DensityTerm.build(detector, targets, eta))


# ============================================================================
# Batch driver
# ============================================================================


def _attack_chunk(
    model: NetworkModel,
    images: Array,
    labels: npt.NDArray[np.int64],
    targets: npt.NDArray[np.int64],
    config: AttackConfig,
    detector: DetectorState | None,
    seed: int,
) -> list[AttackResult]:
    match config.family:
        case AttackFamily.FGSM:
            return fgsm(model, images, labels, config.epsilon)
        case AttackFamily.BIM:
            return bim(model, images, labels, config.epsilon, config.iterations)
        case AttackFamily.ILCM:
            return ilcm(model, images, config.epsilon, config.iterations)
        case AttackFamily.JSMA:
            return jsma(model, images, targets, config.jsma_offset, config.max_pixels)
        case AttackFamily.CW:
            return cw(model, images, targets, config)
        case AttackFamily.CW_HC:
            return cw_hc(model, images, targets, config)
        case AttackFamily.CW_WB:
            if detector is None:
                raise DetectorError("The white-box attack needs a detector.")
            return cw_wb(model, detector, images, targets, config)
        case AttackFamily.RAND:
            return rand_noise(model, images, labels, config.epsilon, seed)


def run_attack(
    model: NetworkModel,
    images: Array,
    labels: npt.ArrayLike,
    config: AttackConfig,
    *,
    detector: DetectorState | None = None,
    threads: int = 1,
) -> AttackRun:
    """Attack every input in fixed-size chunks; the output does not depend on `threads`."""
    y = np.asarray(labels, dtype=np.int64)
    count = images.shape[0]
    if config.family.targeted:
        targets = choose_targets(y, model.num_classes, config.seed)
    else:
        targets = np.full(count, -1, dtype=np.int64)
    if count == 0:
        return AttackRun(config.family, (), y, targets)

    starts: Sequence[int] = range(0, count, config.chunk_size)
    seeds = [int(s) for s in np.random.SeedSequence(config.seed).generate_state(len(starts))]

    def _work(index: int) -> list[AttackResult]:
        start = starts[index]
        stop = start + config.chunk_size
        return _attack_chunk(
            model, images[start:stop], y[start:stop], targets[start:stop], config, detector, seeds[index]
        )

    began = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        chunks = list(pool.map(_work, range(len(starts))))
    results = tuple(result for chunk in chunks for result in chunk)
    if config.family is AttackFamily.ILCM:
        targets = np.array([result.target for result in results], dtype=np.int64)
    successes = sum(result.success for result in results)
    logger.info(
        "%s: %d/%d succeeded in %.1fs", config.family.value, successes, count, time.perf_counter() - began
    )
    return AttackRun(config.family, results, y, targets)
