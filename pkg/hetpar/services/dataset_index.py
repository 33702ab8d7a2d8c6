"""Global index over multiple shards via cumulative lengths."""

import bisect
import logging
from dataclasses import dataclass, field
from itertools import accumulate
from typing import List, Sequence, Tuple

import numpy as np

from hetpar.errors import RecordIndexError, SchemaMismatchError
from hetpar.services.shards import Record, ShardReader

logger = logging.getLogger(__name__)


@dataclass
class DatasetIndex:
    """Ordered shards plus the prefix sums of their record counts."""

    shards: List[ShardReader]
    cumulative: List[int]
    token_lengths: np.ndarray = field(repr=False)

    @property
    def total(self) -> int:
        """Number of instances across all shards."""
        return self.cumulative[-1] if self.cumulative else 0

    def __len__(self) -> int:
        return self.total

    def locate(self, g: int) -> Tuple[int, int]:
        """Map a global index to (shard id, offset)."""
        return locate(self, g)

    def read(self, g: int) -> Record:
        """Read the instance with global index ``g``."""
        shard_id, offset = locate(self, g)
        return self.shards[shard_id].read_record(offset)

    def close(self) -> None:
        """Close all shard handles."""
        for shard in self.shards:
            shard.close()


def build_index(shard_paths: Sequence[str]) -> DatasetIndex:
    """
    Build the cumulative-length index over ``shard_paths``.

    Args:
        shard_paths: Shard files in global order

    Returns:
        DatasetIndex

    Raises:
        SchemaMismatchError: If shards disagree on their field schema
        ShardFormatError: If a shard header is unreadable
    """
    if not shard_paths:
        raise ValueError("At least one shard is required")

    shards = [ShardReader(path) for path in shard_paths]
    schema = None
    counts = []
    for shard in shards:
        if len(shard) > 0:
            if schema is None:
                schema = shard.fields
            elif shard.fields != schema:
                raise SchemaMismatchError(f"{shard.path} schema {shard.fields} differs from {schema}")
        counts.append(len(shard))

    cumulative = list(accumulate(counts))
    lengths = np.concatenate([s.token_lengths for s in shards])
    logger.info(f"Indexed {len(shards)} shards with {cumulative[-1]} instances")
    return DatasetIndex(shards=shards, cumulative=cumulative, token_lengths=lengths)


def locate(index: DatasetIndex, g: int) -> Tuple[int, int]:
    """
    Binary-search the shard holding global index ``g``.

    Returns:
        (shard id, offset within the shard)

    Raises:
        RecordIndexError: If g is outside [0, total)
    """
    if not 0 <= g < index.total:
        raise RecordIndexError(f"Global index {g} out of range [0, {index.total})")
    shard_id = bisect.bisect_right(index.cumulative, g)
    offset = g - (index.cumulative[shard_id - 1] if shard_id > 0 else 0)
    return shard_id, offset
