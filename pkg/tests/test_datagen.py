"""Tests for synthetic dataset generation."""

import os

import numpy as np
import pytest

from hetpar.errors import ConfigurationError
from hetpar.schemas.run import RunConfig
from hetpar.services.datagen import (
    build_synthetic_vocab,
    generate_dataset,
    generate_mlm_nsp,
    generate_synthetic_classify,
    generate_synthetic_sequence,
)
from hetpar.services.dataset_index import build_index
from hetpar.services.rng import SeededRng
from hetpar.services.tokenizer import CLS_ID, SPECIAL_TOKENS


def test_classify_shapes_and_labels():
    """Test feature width and label range."""
    records = generate_synthetic_classify(50, 7, 4, SeededRng(0))

    assert len(records) == 50
    assert all(r["features"].shape == (7,) for r in records)
    assert {int(r["label"]) for r in records} <= set(range(4))


def test_sequence_labels_follow_bands():
    """Test that sequence lengths and labels stay in range."""
    records = generate_synthetic_sequence(40, 30, 3, 10, SeededRng(1))

    for r in records:
        assert 4 <= len(r["tokens"]) <= 10
        assert r["tokens"].min() >= len(SPECIAL_TOKENS)
        assert r["tokens"].max() < 30
        assert 0 <= int(r["label"]) < 3


def test_sequence_needs_enough_ids():
    """Test that the vocabulary must cover every class."""
    with pytest.raises(ConfigurationError):
        generate_synthetic_sequence(2, 7, 3, 8, SeededRng(0))


def test_synthetic_vocab_size():
    """Test that the vocabulary fills up to the requested size."""
    assert len(build_synthetic_vocab(64)) == 64
    assert len(build_synthetic_vocab(10)) == 10


def test_mlm_instances():
    """Test the masked sentence-pair records."""
    records = generate_mlm_nsp(30, 40, 24, SeededRng(2))

    assert all(len(r["tokens"]) <= 24 for r in records)
    assert all(int(r["tokens"][0]) == CLS_ID for r in records)
    assert {int(r["nsp_label"]) for r in records} <= {0, 1}


def test_generate_dataset_is_deterministic(tmp_path):
    """Test that the same seed writes byte-identical shards."""
    config = RunConfig(n_instances=30, n_shards=3, seed=4)

    first = generate_dataset(config, str(tmp_path / "a"))
    second = generate_dataset(config, str(tmp_path / "b"))

    assert [os.path.basename(p) for p in first] == ["shard_00000.hsd", "shard_00001.hsd", "shard_00002.hsd"]
    for a, b in zip(first, second):
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()
    index = build_index(first)
    assert index.total == 30
    index.close()


def test_generate_sequence_dataset(tmp_path):
    """Test the sequence task through the config."""
    config = RunConfig(task="synthetic-sequence", arch="attention_classifier", n_instances=12, n_shards=2)

    paths = generate_dataset(config, str(tmp_path))
    index = build_index(paths)

    assert index.total == 12
    assert np.array_equal(index.token_lengths, [len(index.read(g)["tokens"]) for g in range(12)])
    index.close()
