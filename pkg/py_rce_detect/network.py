from dataclasses import dataclass
from enum import StrEnum
from typing import Final

import numpy as np

from py_rce_detect import ops
from py_rce_detect.exception import ShapeError
from py_rce_detect.tensor import Array, Tensor

DEFAULT_LEAK: Final = 0.1


class Objective(StrEnum):
    CE = "ce"
    LS = "ls"
    RCE = "rce"


@dataclass(frozen=True, slots=True)
class Conv:
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True, slots=True)
class Pool:
    size: int = 2


@dataclass(frozen=True, slots=True)
class Dense:
    units: int


type Layer = Conv | Pool | Dense


@dataclass(frozen=True, slots=True)
class Architecture:
    """Hidden layer stack. The final softmax layer Dense(L) is appended by the model."""

    name: str
    layers: tuple[Layer, ...]


@dataclass(frozen=True, slots=True)
class ForwardPass:
    hidden: Tensor  # Z, N×m: the input of the softmax layer
    logits: Tensor  # Z_pre = W_s Z + b_s, N×L


class NetworkModel:
    def __init__(
        self,
        architecture: Architecture,
        input_shape: tuple[int, int, int],
        num_classes: int,
        objective: Objective = Objective.CE,
        *,
        leak: float = DEFAULT_LEAK,
        seed: int = 0,
    ) -> None:
        if num_classes < 2:  # noqa: PLR2004
            msg = f"Need at least two classes, got {num_classes}."
            raise ValueError(msg)
        self._architecture = architecture
        self._input_shape = input_shape
        self._num_classes = num_classes
        self._objective = objective
        self._leak = leak
        self._seed = seed
        self._train_steps = 0
        self._params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    @property
    def architecture(self) -> Architecture:
        return self._architecture

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self._input_shape

    @property
    def num_classes(self) -> int:
        return self._num_classes

    @property
    def objective(self) -> Objective:
        return self._objective

    @property
    def leak(self) -> float:
        return self._leak

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def train_steps(self) -> int:
        return self._train_steps

    @train_steps.setter
    def train_steps(self, steps: int) -> None:
        self._train_steps = steps

    @property
    def params(self) -> dict[str, Tensor]:
        return self._params

    @property
    def softmax_weights(self) -> Array:
        """W_s as an L×m matrix."""
        return self._params[f"dense{len(self._architecture.layers)}/weight"].data.T.copy()

    @property
    def softmax_bias(self) -> Array:
        return self._params[f"dense{len(self._architecture.layers)}/bias"].data.copy()

    def load_params(self, params: dict[str, Array]) -> None:
        for name, param in self._params.items():
            if name not in params:
                msg = f"Missing parameter {name}."
                raise ShapeError(msg)
            if params[name].shape != param.shape:
                msg = f"Parameter {name} has shape {params[name].shape}, expected {param.shape}."
                raise ShapeError(msg)
            param.data[...] = params[name]

    def forward(self, x: Tensor) -> ForwardPass:
        if x.shape[1:] != self._input_shape:
            msg = f"Expected inputs of shape N×{self._input_shape}, got {x.shape}."
            raise ShapeError(msg)
        h = x
        for index, layer in enumerate(self._architecture.layers):
            match layer:
                case Conv():
                    h = ops.conv2d(h, self._params[f"conv{index}/kernel"], layer.stride, layer.padding)
                    h = ops.add(h, self._params[f"conv{index}/bias"])
                    h = ops.leaky_relu(h, self._leak)
                case Pool():
                    h = ops.max_pool2d(h, layer.size)
                case Dense():
                    h = ops.flatten(h) if len(h.shape) > 2 else h  # noqa: PLR2004
                    h = ops.add(ops.matmul(h, self._params[f"dense{index}/weight"]), self._params[f"dense{index}/bias"])
                    h = ops.leaky_relu(h, self._leak)
        hidden = ops.flatten(h) if len(h.shape) > 2 else h  # noqa: PLR2004
        last = len(self._architecture.layers)
        logits = ops.add(ops.matmul(hidden, self._params[f"dense{last}/weight"]), self._params[f"dense{last}/bias"])
        return ForwardPass(hidden, logits)

    def prediction_logits(self, forward: ForwardPass) -> Tensor:
        """Logits fed to the softmax under the prediction rule: negated for RCE-trained models."""
        if self._objective is Objective.RCE:
            return ops.neg(forward.logits)
        return forward.logits

    def _init_params(self, rng: np.random.Generator) -> None:
        # He-style fan-in scaling; biases start at zero.
        channels, height, width = self._input_shape
        flat: int | None = None
        for index, layer in enumerate(self._architecture.layers):
            match layer:
                case Conv():
                    if flat is not None:
                        raise ValueError("Convolution layers must precede dense layers.")
                    fan_in = channels * layer.kernel * layer.kernel
                    self._params[f"conv{index}/kernel"] = Tensor(
                        rng.normal(0.0, np.sqrt(2.0 / fan_in), (layer.channels, channels, layer.kernel, layer.kernel))
                    )
                    self._params[f"conv{index}/bias"] = Tensor(np.zeros((1, layer.channels, 1, 1)))
                    height = (height + 2 * layer.padding - layer.kernel) // layer.stride + 1
                    width = (width + 2 * layer.padding - layer.kernel) // layer.stride + 1
                    channels = layer.channels
                case Pool():
                    height, width = height // layer.size, width // layer.size
                case Dense():
                    fan_in = flat if flat is not None else channels * height * width
                    self._add_dense(index, fan_in, layer.units, rng)
                    flat = layer.units
            if height <= 0 or width <= 0:
                msg = f"Architecture {self._architecture.name} shrinks input {self._input_shape} to nothing."
                raise ShapeError(msg)
        fan_in = flat if flat is not None else channels * height * width
        self._add_dense(len(self._architecture.layers), fan_in, self._num_classes, rng)

    def _add_dense(self, index: int, fan_in: int, units: int, rng: np.random.Generator) -> None:
        self._params[f"dense{index}/weight"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, units)))
        self._params[f"dense{index}/bias"] = Tensor(np.zeros(units))
