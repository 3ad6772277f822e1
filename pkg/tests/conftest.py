from collections.abc import Callable

import numpy as np
import pytest

from py_rce_detect.classifier import TrainConfig, train
from py_rce_detect.datasets import Dataset, synthetic_blobs
from py_rce_detect.detectors import DetectorState, calibrate, kdensity_eta, kdensity_fit
from py_rce_detect.factories import create_model
from py_rce_detect.network import NetworkModel, Objective
from py_rce_detect.tensor import Array

BLOB_CLASSES = 3
BLOB_DIM = 16


def numeric_gradient(f: Callable[[Array], float], x: Array, h: float = 1e-5) -> Array:
    """Central differences of a scalar function, one coordinate at a time."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = f(x)
        flat[i] = original - h
        lower = f(x)
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * h)
    return grad


def quick_config(objective: Objective, steps: int = 1500, seed: int = 0) -> TrainConfig:
    return TrainConfig(
        objective=objective,
        batch_size=32,
        steps=steps,
        lr_boundaries=(),
        lr_rates=(0.05,),
        weight_decay=0.0,
        seed=seed,
        log_every=500,
    )


@pytest.fixture(scope="session")
def blobs() -> Dataset:
    """Three well separated 4×4 single-channel clusters."""
    return synthetic_blobs(BLOB_CLASSES, 60, BLOB_DIM, 1.0, seed=7)


@pytest.fixture(scope="session")
def held_out_blobs() -> Dataset:
    """Fresh draws around the same centres as `blobs`."""
    pool = synthetic_blobs(BLOB_CLASSES, 120, BLOB_DIM, 1.0, seed=7)
    return pool.subset(np.arange(len(pool) // 2, len(pool)))


def _trained(blobs: Dataset, objective: Objective, architecture: str) -> NetworkModel:
    model = create_model(architecture, blobs.image_shape, blobs.num_classes, objective, seed=1)
    return train(model, blobs, quick_config(objective)).model


@pytest.fixture(scope="session")
def ce_model(blobs: Dataset) -> NetworkModel:
    return _trained(blobs, Objective.CE, "mlp")


@pytest.fixture(scope="session")
def rce_model(blobs: Dataset) -> NetworkModel:
    return _trained(blobs, Objective.RCE, "mlp")


@pytest.fixture(scope="session")
def ce_detector(ce_model: NetworkModel, blobs: Dataset) -> DetectorState:
    state = kdensity_fit(ce_model, blobs, 1.0 / 0.26)
    state = state.with_eta(kdensity_eta(state, ce_model, blobs))
    return calibrate(state, ce_model, blobs, 5.0)


@pytest.fixture(scope="session")
def rce_detector(rce_model: NetworkModel, blobs: Dataset) -> DetectorState:
    state = kdensity_fit(rce_model, blobs, 0.1 / 0.26)
    state = state.with_eta(kdensity_eta(state, rce_model, blobs))
    return calibrate(state, rce_model, blobs, 5.0)
