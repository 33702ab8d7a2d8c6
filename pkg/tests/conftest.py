"""Pytest configuration and fixtures."""

import os
import socket

import numpy as np
import pytest

from hetpar.schemas.model import ModelSpec
from hetpar.schemas.run import RunConfig
from hetpar.services.datagen import generate_synthetic_classify, write_dataset
from hetpar.services.rng import SeededRng

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


@pytest.fixture
def golden_dir():
    """Directory of committed reference outputs."""
    return GOLDEN_DIR


@pytest.fixture
def mlp_spec():
    """Small float64 MLP."""
    return ModelSpec(arch="mlp", d_in=6, hidden=[8], n_classes=3)


@pytest.fixture
def classify_records():
    """Deterministic synthetic-classify records matching ``mlp_spec``."""
    return generate_synthetic_classify(40, 6, 3, SeededRng(11))


@pytest.fixture
def classify_shards(tmp_path):
    """Factory writing ``n`` classify instances over ``n_shards`` shards."""

    def build(n=120, n_shards=3, d_in=6, n_classes=3, seed=5):
        records = generate_synthetic_classify(n, d_in, n_classes, SeededRng(seed))
        return write_dataset(records, str(tmp_path / f"data_{n}_{n_shards}_{seed}"), n_shards)

    return build


@pytest.fixture
def run_config(tmp_path):
    """Factory for a quiet single-process MLP run config; keyword arguments override."""

    def build(**overrides):
        values = dict(
            seed=3,
            d_in=6,
            hidden=[8],
            n_classes=3,
            max_sentences=8,
            prefetch_depth=0,
            cache_bytes=0,
            max_steps=10,
            peak_lr=0.1,
            consistency_interval=1,
            checkpoint_dir=str(tmp_path / "ckpt"),
            comm_timeout=20.0,
        )
        values.update(overrides)
        return RunConfig(**values)

    return build


@pytest.fixture
def free_port():
    """An unused localhost TCP port."""
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def random_params(rng: np.random.Generator, shapes):
    """Float64 arrays of the given shapes with standard-normal entries."""
    return {name: rng.standard_normal(shape) for name, shape in shapes.items()}
