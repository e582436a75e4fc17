"""The toy experiment battery: one place that fixes data, schedule and seeds so
scripts, the CLI and the acceptance suite train identical models."""
from __future__ import annotations

from .. import minidet as md
from .data import DatasetSpec
from .experiment import ExperimentConfig

ITERATIONS = 4000
BATCH_SIZE = 16
SHF_BLOCKS = (1, 2, 4, 8, 16)
N_INCORRECT = 20
N_ATTACK = 100


def toy_data(seed: int = 0) -> DatasetSpec:
    return DatasetSpec(n_train=2000, n_test=300, seed=seed)


def toy_train(iterations: int = ITERATIONS, seed: int = 0) -> md.TrainConfig:
    return md.TrainConfig.scaled(iterations, batch_size=BATCH_SIZE, seed=seed)


def _cfg(iterations: int, **kw) -> ExperimentConfig:
    return ExperimentConfig(train=toy_train(iterations), data=toy_data(), n_incorrect=N_INCORRECT, **kw)


def baseline(iterations: int = ITERATIONS) -> ExperimentConfig:
    return _cfg(iterations)


def cp_feature(map_id: str, iterations: int = ITERATIONS) -> ExperimentConfig:
    return _cfg(iterations, mode="cp", map_id=map_id)


def shf_input(block: int, iterations: int = ITERATIONS) -> ExperimentConfig:
    return _cfg(iterations, mode="shf", block=block)
