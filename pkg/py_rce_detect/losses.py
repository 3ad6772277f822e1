"""Training objectives on probabilities of shape (L,) or (N, L); each returns the mean over rows."""

import numpy as np
import numpy.typing as npt

from py_rce_detect import ops
from py_rce_detect.exception import InvalidLabelError, ShapeError
from py_rce_detect.network import Objective
from py_rce_detect.tensor import Array, Tensor


def _as_batch(probs: Tensor, labels: npt.ArrayLike) -> tuple[Tensor, npt.NDArray[np.int64]]:
    batch = ops.reshape(probs, (1, probs.shape[0])) if len(probs.shape) == 1 else probs
    if len(batch.shape) != 2:  # noqa: PLR2004
        msg = f"Expected probabilities of shape (L,) or (N, L), got {probs.shape}."
        raise ShapeError(msg)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != batch.shape[0]:
        msg = f"Got {y.shape[0]} labels for {batch.shape[0]} rows."
        raise ShapeError(msg)
    num_classes = batch.shape[1]
    if np.any((y < 0) | (y >= num_classes)):
        msg = f"Labels must lie in [0, {num_classes}), got {y.tolist()}."
        raise InvalidLabelError(msg)
    return batch, y


def reverse_label(y: int, num_classes: int) -> Array:
    """R_y: zero on class y, 1/(L-1) elsewhere."""
    target = np.full(num_classes, 1.0 / (num_classes - 1))
    target[y] = 0.0
    return target


def smoothed_label(y: int, num_classes: int, smoothing: float) -> Array:
    """P^lambda: 1/(lambda+1) on class y, lambda/((L-1)(lambda+1)) elsewhere."""
    target = np.full(num_classes, smoothing / ((num_classes - 1) * (smoothing + 1.0)))
    target[y] = 1.0 / (smoothing + 1.0)
    return target


def _reverse_targets(y: npt.NDArray[np.int64], num_classes: int) -> Array:
    targets = np.full((y.shape[0], num_classes), 1.0 / (num_classes - 1))
    targets[np.arange(y.shape[0]), y] = 0.0
    return targets


def ce_loss(probs: Tensor, labels: npt.ArrayLike) -> Tensor:
    """-log F(x)_y with probabilities floored at 1e-12."""
    batch, y = _as_batch(probs, labels)
    return ops.neg(ops.mean(ops.log(ops.take(batch, y))))


def rce_loss(probs: Tensor, labels: npt.ArrayLike) -> Tensor:
    """-R_y^T log F(x)."""
    batch, y = _as_batch(probs, labels)
    if batch.shape[1] < 2:  # noqa: PLR2004
        raise ShapeError("Reverse cross-entropy needs at least two classes.")
    weighted = ops.mul(ops.log(batch), Tensor(_reverse_targets(y, batch.shape[1])))
    return ops.neg(ops.mean(ops.sum_(weighted, axis=1)))


def label_smoothing_loss(probs: Tensor, labels: npt.ArrayLike, smoothing: float) -> Tensor:
    """ce_loss - lambda * R_y^T log F(x)."""
    if smoothing < 0:
        msg = f"Label smoothing weight must be non-negative, got {smoothing}."
        raise ValueError(msg)
    ce = ce_loss(probs, labels)
    if smoothing == 0:
        return ce
    return ops.add(ce, ops.scale(rce_loss(probs, labels), smoothing))


def objective_loss(objective: Objective, logits: Tensor, labels: npt.ArrayLike, smoothing: float = 0.0) -> Tensor:
    """Training loss of `objective`, computed on softmax(Z_pre) (never on the negated logits)."""
    probs = ops.softmax(logits)
    match objective:
        case Objective.CE:
            return ce_loss(probs, labels)
        case Objective.LS:
            return label_smoothing_loss(probs, labels, smoothing)
        case Objective.RCE:
            return rce_loss(probs, labels)


def per_sample_loss(objective: Objective, logits: Array, labels: npt.ArrayLike) -> Array:
    """Untaped per-row training loss for N×L logits; LS rows are scored with plain CE."""
    probs = ops.softmax(Tensor(logits)).data
    y = np.asarray(labels, dtype=np.int64)
    logs = np.log(np.maximum(probs, ops.PROBABILITY_FLOOR))
    if objective is Objective.RCE:
        return -(_reverse_targets(y, probs.shape[1]) * logs).sum(axis=1)
    return -logs[np.arange(y.shape[0]), y]
