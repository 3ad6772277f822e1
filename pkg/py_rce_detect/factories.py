"""Factory functions for creating pipeline components.

Provides factories for creating:
- Architectures (shallow and deep desk CNNs, MLP, linear)
- Models
- Datasets (MNIST, CIFAR-10, synthetic blobs)
"""

import dataclasses
from pathlib import Path
from typing import Literal

from py_rce_detect.datasets import Dataset, load_cifar_dir, load_mnist_dir, synthetic_blobs
from py_rce_detect.network import Architecture, Conv, Dense, NetworkModel, Objective, Pool

type ArchitectureName = Literal["shallow-cnn", "deep-cnn", "mlp", "linear"]
type DatasetName = Literal["mnist", "cifar10", "synthetic"]

ARCHITECTURES: tuple[ArchitectureName, ...] = ("shallow-cnn", "deep-cnn", "mlp", "linear")
DATASETS: tuple[DatasetName, ...] = ("mnist", "cifar10", "synthetic")

# ============================================================================
# Architectures and models
# ============================================================================


def create_architecture(name: str) -> Architecture:
    match name:
        case "shallow-cnn":
            return Architecture(name, (Conv(16), Pool(), Conv(32), Pool(), Dense(64)))
        case "deep-cnn":
            return Architecture(name, (Conv(16), Pool(), Conv(32), Pool(), Conv(64), Pool(), Dense(64)))
        case "mlp":
            return Architecture(name, (Dense(128), Dense(64)))
        case "linear":
            return Architecture(name, ())
        case _:
            msg = f"Unknown architecture: {name}. Choose from {', '.join(ARCHITECTURES)}."
            raise ValueError(msg)


def create_model(
    architecture: str,
    input_shape: tuple[int, int, int],
    num_classes: int,
    objective: Objective,
    *,
    leak: float = 0.1,
    seed: int = 0,
) -> NetworkModel:
    return NetworkModel(create_architecture(architecture), input_shape, num_classes, objective, leak=leak, seed=seed)


# ============================================================================
# Datasets
# ============================================================================


def create_datasets(
    name: str,
    path: Path | None,
    *,
    seed: int = 0,
    synthetic_classes: int = 3,
    synthetic_per_class: int = 100,
    synthetic_dim: int = 16,
    synthetic_separation: float = 1.0,
) -> tuple[Dataset, Dataset]:
    """(train, test) splits for `name`. Synthetic splits are drawn from one seeded pool."""
    match name:
        case "mnist" | "cifar10":
            if path is None:
                msg = f"Dataset {name} needs a data directory."
                raise ValueError(msg)
            loader = load_mnist_dir if name == "mnist" else load_cifar_dir
            return loader(path, "train"), loader(path, "test")
        case "synthetic":
            pool = synthetic_blobs(
                synthetic_classes, 2 * synthetic_per_class, synthetic_dim, synthetic_separation, seed
            )
            half = len(pool) // 2
            train = pool.subset(range(half))
            test = pool.subset(range(half, len(pool)))
            return dataclasses.replace(train, split="train"), dataclasses.replace(test, split="test")
        case _:
            msg = f"Unknown dataset: {name}. Choose from {', '.join(DATASETS)}."
            raise ValueError(msg)
