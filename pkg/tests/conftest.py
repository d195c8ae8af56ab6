"""Session fixtures: trained models shared by the end-to-end tests.

Training is deterministic, so every fixture is reproducible.  Set
TABDENS_TEST_CACHE to a directory to reuse checkpoints between runs while
iterating; without it each session trains from scratch.  Cached checkpoints
report a training time of zero, so wall-clock assertions only bite on fresh
runs.
"""

import os
import time
from pathlib import Path
from typing import NamedTuple

import pytest

from tabdens import RawTable, train
from tabdens.datasets import (make_bimodal_table, make_housing_table,
                              make_normal_table, make_pair_table)
from tabdens.training import (Checkpoint, TrainConfig, load_checkpoint,
                              make_config, save_checkpoint)


class TrainedModel(NamedTuple):
    ckpt: Checkpoint
    table: RawTable
    train_seconds: float


def _session_model(name: str, config: TrainConfig, table: RawTable) -> TrainedModel:
    cache = os.environ.get("TABDENS_TEST_CACHE")
    path = Path(cache) / f"{name}.ckpt" if cache else None
    if path is not None and path.exists():
        return TrainedModel(load_checkpoint(path), table, 0.0)
    start = time.perf_counter()
    ckpt = train(config, table=table)
    elapsed = time.perf_counter() - start
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, path)
    return TrainedModel(ckpt, table, elapsed)


@pytest.fixture(scope="session")
def housing_model() -> TrainedModel:
    """The nine-feature table at the full desk-scale settings."""
    return _session_model("housing", make_config("housing", seed=7),
                          make_housing_table(seed=4))


@pytest.fixture(scope="session")
def normal_model() -> TrainedModel:
    """One standard-normal column; the simplest full-pipeline target.

    The fine 480-step schedule matters here: with posterior-variance
    sampling the reverse chain loses a per-step slice of marginal variance
    that shrinks as the schedule gets finer, and on a wide distribution the
    coarse default schedule lands within noise of the round-trip tolerance.
    """
    config = make_config(epochs=384, cycle_length=64, batch_size=512,
                         context_length=2, d_model=16, n_heads=2, n_layers=2,
                         n_steps=480, seed=13)
    return _session_model("normal", config, make_normal_table(10000, seed=0))


@pytest.fixture(scope="session")
def bimodal_model() -> TrainedModel:
    """Flag plus two-mode target; exercises non-Gaussian conditionals."""
    config = make_config(epochs=320, cycle_length=64, batch_size=512,
                         context_length=3, d_model=16, n_heads=2, n_layers=2,
                         seed=17)
    return _session_model("bimodal", config, make_bimodal_table(8000, seed=1))


@pytest.fixture(scope="session")
def pair_model() -> TrainedModel:
    """Tightly coupled x, y columns for joint-sampling checks."""
    config = make_config(epochs=384, cycle_length=96, batch_size=512,
                         context_length=3, d_model=16, n_heads=2, n_layers=2,
                         seed=19)
    return _session_model("pair", config, make_pair_table(6000, seed=2, noise=0.1))
