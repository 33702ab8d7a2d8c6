"""Tests for epoch batching, rank partitioning and the loader."""

import math

import numpy as np
import pytest

from hetpar.errors import ConfigurationError, UnsupportedConfigurationError
from hetpar.schemas.data import BatchPlan
from hetpar.services.batching import build_epoch_batches, partition_for_rank, updates_in_epoch
from hetpar.services.dataset_index import build_index
from hetpar.services.loader import END_OF_EPOCH, BatchLoader, BlockCache


def _plan(num_batches):
    return BatchPlan(epoch=0, seed=0, batches=[[i] for i in range(num_batches)])


def test_packs_by_sentence_cap():
    """Test five instances with two per batch."""
    plan = build_epoch_batches([1] * 5, max_sentences=2, max_tokens=0, base_seed=0, epoch=0)

    assert [len(b) for b in plan.batches] == [2, 2, 1]
    assert sorted(g for b in plan.batches for g in b) == list(range(5))


def test_packs_by_token_cap():
    """Test the token cap closing batches."""
    plan = build_epoch_batches([5, 5, 5], max_sentences=10, max_tokens=10, base_seed=1, epoch=0)

    assert [len(b) for b in plan.batches] == [2, 1]


def test_instance_longer_than_token_cap():
    """Test that an instance that can never fit is a configuration error."""
    with pytest.raises(ConfigurationError):
        build_epoch_batches([3, 12], max_sentences=4, max_tokens=10, base_seed=0, epoch=0)


def test_plan_depends_on_seed_plus_epoch():
    """Test determinism and the S + N seeding."""
    lengths = list(range(1, 41))
    a = build_epoch_batches(lengths, 4, 0, base_seed=7, epoch=2)
    b = build_epoch_batches(lengths, 4, 0, base_seed=7, epoch=2)
    c = build_epoch_batches(lengths, 4, 0, base_seed=7, epoch=3)
    d = build_epoch_batches(lengths, 4, 0, base_seed=8, epoch=2)

    assert a.model_dump_json() == b.model_dump_json()
    assert a.batches != c.batches
    assert d.batches == c.batches


def test_partition_three_batches_four_ranks():
    """Test that the fourth rank gets a dummy round."""
    plan = _plan(3)

    ranks = [partition_for_rank(plan, 4, r) for r in range(4)]

    assert [rp.real_batches for rp in ranks] == [[0], [1], [2], []]
    assert ranks[3].rounds[0].is_dummy
    assert ranks[3].rounds[0].batch_index == 0


def test_partition_ten_batches_four_ranks():
    """Test round-robin counts and dummy padding."""
    plan = _plan(10)

    ranks = [partition_for_rank(plan, 4, r) for r in range(4)]

    assert [len(rp.real_batches) for rp in ranks] == [3, 3, 2, 2]
    assert all(len(rp.rounds) == 3 for rp in ranks)
    assert ranks[2].rounds[2].is_dummy and ranks[2].rounds[2].batch_index == 2
    assert ranks[3].rounds[2].is_dummy and ranks[3].rounds[2].batch_index == 3
    assert ranks[1].real_batches == [1, 5, 9]


def test_partition_world_one():
    """Test that a single rank gets every batch."""
    rank_plan = partition_for_rank(_plan(4), 1, 0)

    assert rank_plan.real_batches == [0, 1, 2, 3]
    assert not any(r.is_dummy for r in rank_plan.rounds)


@pytest.mark.parametrize("num_batches", [1, 2, 3, 7, 63, 64, 65, 127, 500, 999, 1000])
def test_partition_covers_every_batch_once(num_batches):
    """Test completeness and dummy counts for every world size up to 64."""
    plan = _plan(num_batches)

    for world in range(1, 65):
        ranks = [partition_for_rank(plan, world, r) for r in range(world)]
        rounds = math.ceil(num_batches / world)

        assigned = sorted(b for rp in ranks for b in rp.real_batches)
        assert assigned == list(range(num_batches))
        assert all(len(rp.rounds) == rounds for rp in ranks)
        assert all([r.round_index for r in rp.rounds] == list(range(rounds)) for rp in ranks)
        dummies = [(rp.rank, r.round_index) for rp in ranks for r in rp.rounds if r.is_dummy]
        assert len(dummies) == world * rounds - num_batches
        assert all(k * world + rank >= num_batches for rank, k in dummies)


def test_partition_without_borrowing():
    """Test that a rank without data is refused when borrowing is off."""
    with pytest.raises(UnsupportedConfigurationError):
        partition_for_rank(_plan(3), 4, 3, borrow_dummy=False)


def test_updates_in_epoch():
    """Test update counting for worlds and accumulation factors."""
    assert updates_in_epoch(4, 2, 1) == 2
    assert updates_in_epoch(4, 1, 2) == 2
    assert updates_in_epoch(10, 4, 1) == 3
    assert updates_in_epoch(10, 1, 4) == 3


def _loader(paths, world, rank, depth, cache=None):
    index = build_index(paths)
    plan = build_epoch_batches(index.token_lengths, 4, 0, base_seed=1, epoch=0)
    rank_plan = partition_for_rank(plan, world, rank)
    return index, BatchLoader(index, plan, rank_plan, prefetch_depth=depth, cache=cache)


def _sequence(loader):
    return [(b.batch_index, b.is_dummy, [r["features"].tobytes() for r in b.records]) for b in loader]


def test_prefetch_is_transparent(classify_shards):
    """Test that prefetching yields the synchronous sequence."""
    paths = classify_shards(n=50, n_shards=3)

    index_a, sync = _loader(paths, 3, 2, depth=0)
    index_b, prefetched = _loader(paths, 3, 2, depth=4)

    expected = _sequence(sync)
    assert _sequence(prefetched) == expected
    assert len(expected) == 5  # ceil(13 / 3) rounds
    assert expected[-1][1]  # padded with a dummy
    prefetched.close()
    index_a.close()
    index_b.close()


def test_end_of_epoch_signal(classify_shards):
    """Test that the loader reports the end of the plan repeatedly."""
    paths = classify_shards(n=16, n_shards=2)
    index, loader = _loader(paths, 1, 0, depth=2)

    batches = [loader.next_batch() for _ in range(4)]

    assert all(b is not END_OF_EPOCH for b in batches)
    assert loader.next_batch() is END_OF_EPOCH
    assert loader.next_batch() is END_OF_EPOCH
    loader.close()
    index.close()


@pytest.mark.parametrize("policy", ["lru", "lfu"])
def test_tiny_cache_gives_same_batches(classify_shards, policy):
    """Test that a one-block cache is only slower."""
    paths = classify_shards(n=60, n_shards=4)

    index_a, plain = _loader(paths, 1, 0, depth=0)
    cache = BlockCache(capacity_bytes=400, block_bytes=300, policy=policy)
    index_b, cached = _loader(paths, 1, 0, depth=0, cache=cache)

    assert _sequence(cached) == _sequence(plain)
    assert cache.misses > 0
    assert cache._size <= 400
    index_a.close()
    index_b.close()


def test_cache_hits_on_repeat(classify_shards):
    """Test that repeated reads are served from memory."""
    paths = classify_shards(n=20, n_shards=1)
    index = build_index(paths)
    cache = BlockCache(capacity_bytes=1 << 20, block_bytes=1 << 16)

    first = [cache.fetch(0, index.shards[0], i) for i in range(20)]
    second = [cache.fetch(0, index.shards[0], i) for i in range(20)]

    assert cache.misses == 1
    assert cache.hits == 39
    assert all(np.array_equal(a["features"], b["features"]) for a, b in zip(first, second))
    index.close()


def test_unknown_cache_policy():
    """Test that only lru and lfu are accepted."""
    with pytest.raises(ValueError):
        BlockCache(100, 10, policy="fifo")
