import logging
import math
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from py_rce_detect import ops
from py_rce_detect.datasets import Dataset, augment_cifar
from py_rce_detect.exception import DivergenceError, NumericError
from py_rce_detect.losses import objective_loss
from py_rce_detect.network import NetworkModel, Objective
from py_rce_detect.optim import LearningRateSchedule, OptimizerState, sgd_step
from py_rce_detect.tensor import Array, Tape, Tensor, backward

logger = logging.getLogger(__name__)

INFERENCE_BATCH = 256


@dataclass(frozen=True, slots=True)
class TrainConfig:
    objective: Objective = Objective.CE
    batch_size: int = 128
    steps: int = 20000
    lr_boundaries: tuple[int, ...] = (10000, 15000, 20000)
    lr_rates: tuple[float, ...] = (0.1, 0.01, 0.001, 0.0001)
    momentum: float = 0.9
    weight_decay: float = 0.0002
    leak: float = 0.1
    smoothing: float = 0.0
    seed: int = 0
    augment: bool = False
    log_every: int = 100

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            msg = f"Batch size must be at least 1, got {self.batch_size}."
            raise ValueError(msg)
        if self.steps < 0:
            msg = f"Step count must be non-negative, got {self.steps}."
            raise ValueError(msg)
        if self.smoothing < 0:
            msg = f"Label smoothing weight must be non-negative, got {self.smoothing}."
            raise ValueError(msg)
        if self.log_every < 1:
            raise ValueError("log_every must be at least 1.")

    @property
    def schedule(self) -> LearningRateSchedule:
        return LearningRateSchedule(self.lr_boundaries, self.lr_rates)


@dataclass(frozen=True, slots=True)
class TrainResult:
    model: NetworkModel
    loss_trace: tuple[tuple[int, float], ...]  # (step, mean loss since the previous entry)


@dataclass(frozen=True, slots=True)
class ModelOutputs:
    hidden: Array  # Z, N×m
    logits: Array  # Z_pre, N×L
    probs: Array  # softmax under the prediction rule
    labels: npt.NDArray[np.int64]  # ŷ, ties to the lowest index

    @property
    def confidences(self) -> Array:
        return self.probs[np.arange(self.labels.shape[0]), self.labels]


def train(model: NetworkModel, dataset: Dataset, config: TrainConfig) -> TrainResult:
    if len(dataset) == 0:
        raise ValueError("Cannot train on an empty dataset.")
    if model.objective is not config.objective:
        msg = f"Model objective {model.objective} does not match training objective {config.objective}."
        raise ValueError(msg)
    if model.num_classes != dataset.num_classes:
        msg = f"Model has {model.num_classes} classes, dataset has {dataset.num_classes}."
        raise ValueError(msg)

    rng = np.random.default_rng(config.seed)
    state = OptimizerState(config.schedule, config.momentum, config.weight_decay)
    names = list(model.params)
    size = len(dataset)
    batch = min(config.batch_size, size)
    order = rng.permutation(size)
    cursor = 0
    trace: list[tuple[int, float]] = []
    window: list[float] = []

    for step in range(config.steps):
        if cursor + batch > size:
            order = rng.permutation(size)
            cursor = 0
        idx = order[cursor : cursor + batch]
        cursor += batch
        images = dataset.images[idx]
        if config.augment:
            images = augment_cifar(images, int(rng.integers(2**32)))

        try:
            with Tape() as tape:
                forward = model.forward(Tensor(images))
                loss = objective_loss(config.objective, forward.logits, dataset.labels[idx], config.smoothing)
        except NumericError as e:
            raise DivergenceError(step, math.nan) from e
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        grads = backward(tape, loss)
        sgd_step(model.params, {name: grads[model.params[name]] for name in names}, state, step)

        window.append(value)
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            mean_loss = float(np.mean(window))
            trace.append((step + 1, mean_loss))
            window.clear()
            logger.info("step %d/%d loss %.6f lr %g", step + 1, config.steps, mean_loss, state.schedule.rate(step))

    model.train_steps += config.steps
    return TrainResult(model, tuple(trace))


# ============================================================================
# Prediction
# ============================================================================


def infer(model: NetworkModel, images: Array, batch_size: int = INFERENCE_BATCH) -> ModelOutputs:
    """Forward `images` (N×C×H×W) in batches and apply the model's prediction rule."""
    count = images.shape[0]
    if count == 0:
        hidden_dim = model.softmax_weights.shape[1]
        return ModelOutputs(
            np.zeros((0, hidden_dim)),
            np.zeros((0, model.num_classes)),
            np.zeros((0, model.num_classes)),
            np.zeros(0, dtype=np.int64),
        )
    hidden, logits, probs = [], [], []
    for start in range(0, count, batch_size):
        forward = model.forward(Tensor(images[start : start + batch_size]))
        hidden.append(forward.hidden.data)
        logits.append(forward.logits.data)
        probs.append(ops.softmax(model.prediction_logits(forward)).data)
    all_probs = np.concatenate(probs)
    return ModelOutputs(
        np.concatenate(hidden),
        np.concatenate(logits),
        all_probs,
        np.argmax(all_probs, axis=1).astype(np.int64),
    )


def label_and_confidence(probs: npt.ArrayLike) -> tuple[int, float]:
    p = np.asarray(probs, dtype=np.float64)
    label = int(np.argmax(p))
    return label, float(p[label])


def predict_label(model: NetworkModel, x: Array) -> tuple[int, float]:
    """(ŷ, F(x)_ŷ) for a single C×H×W input under the model's prediction rule."""
    outputs = infer(model, x[np.newaxis])
    return label_and_confidence(outputs.probs[0])


def predict_labels(model: NetworkModel, images: Array) -> tuple[npt.NDArray[np.int64], Array]:
    outputs = infer(model, images)
    return outputs.labels, outputs.confidences


def reverse_softmax(logits: npt.ArrayLike) -> Array:
    """softmax(-Z_pre)."""
    return ops.softmax(Tensor(-np.asarray(logits, dtype=np.float64))).data


def reverse_logits_predict(model: NetworkModel, x: Array) -> Array:
    forward = model.forward(Tensor(x[np.newaxis]))
    return reverse_softmax(forward.logits.data[0])


def accuracy(model: NetworkModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return math.nan
    labels, _ = predict_labels(model, dataset.images)
    return float(np.mean(labels == dataset.labels))
