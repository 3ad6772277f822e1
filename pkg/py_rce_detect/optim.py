import bisect
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from py_rce_detect.exception import ShapeError
from py_rce_detect.tensor import Array, Tensor

DEFAULT_MOMENTUM = 0.9


@dataclass(frozen=True, slots=True)
class LearningRateSchedule:
    """Piecewise-constant rates: `rates[i]` applies on the half-open step interval [boundaries[i-1], boundaries[i])."""

    boundaries: tuple[int, ...]
    rates: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.rates) != len(self.boundaries) + 1:
            msg = f"Need one more rate than boundaries, got {len(self.rates)} and {len(self.boundaries)}."
            raise ValueError(msg)
        if list(self.boundaries) != sorted(self.boundaries):
            raise ValueError("Schedule boundaries must be non-decreasing.")

    @classmethod
    def constant(cls, rate: float) -> "LearningRateSchedule":
        return cls((), (rate,))

    def rate(self, step: int) -> float:
        # Steps past the last boundary keep the last scheduled rate.
        return self.rates[bisect.bisect_right(self.boundaries, step)]


@dataclass(slots=True)
class OptimizerState:
    schedule: LearningRateSchedule
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = 0.0
    velocities: dict[str, Array] = field(default_factory=dict)


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Array],
    state: OptimizerState,
    step_index: int,
) -> tuple[Mapping[str, Tensor], OptimizerState]:
    """v <- mu*v + g + wd*p; p <- p - lr(step)*v. Parameters are updated in place."""
    lr = state.schedule.rate(step_index)
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            msg = f"Gradient for {name} has shape {grad.shape}, parameter has {param.shape}."
            raise ShapeError(msg)
        velocity = state.velocities.get(name)
        if velocity is None:
            velocity = np.zeros(param.shape)
        velocity = state.momentum * velocity + grad + state.weight_decay * param.data
        state.velocities[name] = velocity
        param.data[...] = param.data - lr * velocity
    return params, state


@dataclass(slots=True)
class AdamState:
    """Per-attack scratch space for Adam updates on an unconstrained variable."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Array | None = None
    second_moment: Array | None = None

    def update(self, value: Array, grad: Array) -> Array:
        if self.first_moment is None or self.second_moment is None:
            self.first_moment = np.zeros(value.shape)
            self.second_moment = np.zeros(value.shape)
        self.step += 1
        self.first_moment = self.beta1 * self.first_moment + (1.0 - self.beta1) * grad
        self.second_moment = self.beta2 * self.second_moment + (1.0 - self.beta2) * np.square(grad)
        m_hat = self.first_moment / (1.0 - self.beta1**self.step)
        v_hat = self.second_moment / (1.0 - self.beta2**self.step)
        return value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
