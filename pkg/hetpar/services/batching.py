"""Deterministic epoch batching and round-robin rank partitioning."""

import logging
import math
from typing import List, Sequence

from hetpar.errors import ConfigurationError, UnsupportedConfigurationError
from hetpar.schemas.data import BatchPlan, RankBatch, RankPlan
from hetpar.services.rng import derived_rng

logger = logging.getLogger(__name__)


def build_epoch_batches(
    lengths: Sequence[int],
    max_sentences: int,
    max_tokens: int,
    base_seed: int,
    epoch: int,
) -> BatchPlan:
    """
    Shuffle instances with seed S + N and pack them greedily into batches.

    A batch closes when adding the next instance would exceed
    ``max_sentences`` instances or ``max_tokens`` tokens.

    Args:
        lengths: Token length per global instance index
        max_sentences: Instance cap per batch, at least 1
        max_tokens: Token cap per batch; 0 disables it
        base_seed: Run seed S
        epoch: Epoch number N

    Returns:
        BatchPlan covering every instance exactly once

    Raises:
        ConfigurationError: If max_sentences < 1 or one instance exceeds max_tokens
    """
    if max_sentences < 1:
        raise ConfigurationError(f"max_sentences must be at least 1, got {max_sentences}")

    order = derived_rng(base_seed, epoch).permutation(len(lengths))

    batches: List[List[int]] = []
    current: List[int] = []
    current_tokens = 0
    for g in order:
        length = int(lengths[g])
        if max_tokens and length > max_tokens:
            raise ConfigurationError(f"Instance {g} has {length} tokens, more than max_tokens {max_tokens}")
        full = len(current) + 1 > max_sentences or (max_tokens and current_tokens + length > max_tokens)
        if current and full:
            batches.append(current)
            current, current_tokens = [], 0
        current.append(g)
        current_tokens += length
    if current:
        batches.append(current)

    logger.debug(f"Epoch {epoch}: packed {len(lengths)} instances into {len(batches)} batches")
    return BatchPlan(epoch=epoch, seed=base_seed, batches=batches)


def partition_for_rank(plan: BatchPlan, world_size: int, rank: int, borrow_dummy: bool = True) -> RankPlan:
    """
    Rank r takes batches r, r + w, r + 2w, …; missing rounds become dummies.

    A dummy carries the rank's first real batch as input. A rank without any
    real batch borrows global batch 0 when ``borrow_dummy`` is set.

    Args:
        plan: Epoch batch plan
        world_size: Number of ranks w
        rank: This rank, in [0, w)
        borrow_dummy: Allow ranks without real batches

    Returns:
        RankPlan with ceil(B / w) rounds

    Raises:
        UnsupportedConfigurationError: If the plan is empty, or the rank has
            no real batch and borrowing is disabled
    """
    if not 0 <= rank < world_size:
        raise ConfigurationError(f"rank {rank} outside [0, {world_size})")

    num_batches = plan.num_batches
    if num_batches == 0:
        raise UnsupportedConfigurationError(f"Epoch {plan.epoch} has no batches to train on")
    if rank >= num_batches and not borrow_dummy:
        raise UnsupportedConfigurationError(
            f"Rank {rank} has no batch in epoch {plan.epoch}: {num_batches} batches for {world_size} ranks"
        )

    dummy_source = rank if rank < num_batches else 0
    rounds = []
    for k in range(math.ceil(num_batches / world_size)):
        index = k * world_size + rank
        if index < num_batches:
            rounds.append(RankBatch(round_index=k, batch_index=index))
        else:
            rounds.append(RankBatch(round_index=k, batch_index=dummy_source, is_dummy=True))
    return RankPlan(epoch=plan.epoch, rank=rank, world_size=world_size, rounds=rounds)


def updates_in_epoch(num_batches: int, world_size: int, update_freq: int) -> int:
    """Optimizer updates an epoch of ``num_batches`` yields for a world and accumulation factor."""
    return math.ceil(math.ceil(num_batches / world_size) / update_freq)
