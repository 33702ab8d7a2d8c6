"""Per-rank batch loader with background prefetch and a shard block cache."""

import bisect
import logging
import queue
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

from hetpar.schemas.data import BatchPlan, RankBatch, RankPlan
from hetpar.services.dataset_index import DatasetIndex, locate
from hetpar.services.shards import Record, ShardReader

logger = logging.getLogger(__name__)


@dataclass
class Batch:
    """Records of one rank round; dummies carry the borrowed batch's records."""

    records: List[Record] = field(repr=False)
    indices: List[int]
    token_count: int
    is_dummy: bool
    round_index: int
    batch_index: int


class EndOfEpoch:
    """Signal returned by ``next_batch`` once the rank plan is exhausted."""

    def __repr__(self) -> str:
        return "END_OF_EPOCH"


END_OF_EPOCH = EndOfEpoch()


class BlockCache:
    """Byte-bounded cache of decoded shard blocks.

    A block is a run of consecutive records spanning at most
    ``block_bytes`` (a single larger record forms its own block). Eviction is
    least-recently-used or least-frequently-used. Correctness never depends
    on what the cache holds.
    """

    def __init__(self, capacity_bytes: int, block_bytes: int, policy: str = "lru"):
        """Initialize an empty cache."""
        if policy not in ("lru", "lfu"):
            raise ValueError(f"Unknown cache policy {policy!r}, expected lru or lfu")
        self.capacity_bytes = capacity_bytes
        self.block_bytes = block_bytes
        self.policy = policy
        self.hits = 0
        self.misses = 0
        self._entries: "OrderedDict[Tuple[int, int], Tuple[List[Record], int]]" = OrderedDict()
        self._uses: Dict[Tuple[int, int], int] = {}
        self._size = 0
        self._boundaries: Dict[int, List[int]] = {}
        self._lock = threading.Lock()

    def _block_starts(self, shard_id: int, shard: ShardReader) -> List[int]:
        starts = self._boundaries.get(shard_id)
        if starts is None:
            offsets = shard.meta.offsets
            data_end = shard.meta.data_end
            starts = []
            block_start_byte = None
            for i in range(len(offsets)):
                end = int(offsets[i + 1]) if i + 1 < len(offsets) else data_end
                if block_start_byte is None or end - block_start_byte > self.block_bytes:
                    starts.append(i)
                    block_start_byte = int(offsets[i])
            self._boundaries[shard_id] = starts
        return starts

    def _evict_one(self) -> None:
        if self.policy == "lru":
            key, (_, nbytes) = self._entries.popitem(last=False)
        else:
            # lowest use count, oldest first on ties
            key = min(self._entries, key=lambda k: self._uses[k])
            _, nbytes = self._entries.pop(key)
        self._uses.pop(key, None)
        self._size -= nbytes

    def fetch(self, shard_id: int, shard: ShardReader, offset: int) -> Record:
        """Return record ``offset`` of ``shard``, reading its whole block on a miss."""
        with self._lock:
            starts = self._block_starts(shard_id, shard)
        block_id = bisect.bisect_right(starts, offset) - 1
        key = (shard_id, block_id)
        first = starts[block_id]

        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                self.hits += 1
                self._uses[key] += 1
                self._entries.move_to_end(key)
                return entry[0][offset - first]
            self.misses += 1

        last = starts[block_id + 1] if block_id + 1 < len(starts) else len(shard)
        records = shard.read_range(first, last)
        nbytes = shard.record_span(last - 1)[1] - shard.record_span(first)[0]

        with self._lock:
            if nbytes <= self.capacity_bytes and key not in self._entries:
                while self._entries and self._size + nbytes > self.capacity_bytes:
                    self._evict_one()
                self._entries[key] = (records, nbytes)
                self._uses[key] = 1
                self._size += nbytes
        return records[offset - first]


class BatchLoader:
    """Assembles a rank's batches in plan order.

    With ``prefetch_depth`` > 0 a background thread keeps up to that many
    batches ready in a bounded queue; the produced sequence is identical to
    the synchronous one.
    """

    def __init__(
        self,
        index: DatasetIndex,
        plan: BatchPlan,
        rank_plan: RankPlan,
        prefetch_depth: int = 2,
        cache: Optional[BlockCache] = None,
        skip_rounds: int = 0,
    ):
        """Initialize the loader; prefetching starts on the first ``next_batch``."""
        self.index = index
        self.plan = plan
        self.rank_plan = rank_plan
        self.prefetch_depth = prefetch_depth
        self.cache = cache
        self._pending: List[RankBatch] = list(rank_plan.rounds[skip_rounds:])
        self._position = 0
        self._queue: Optional[queue.Queue] = None
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    def __len__(self) -> int:
        return len(self._pending)

    def _read(self, g: int) -> Record:
        shard_id, offset = locate(self.index, g)
        shard = self.index.shards[shard_id]
        if self.cache is not None and self.cache.capacity_bytes > 0:
            return self.cache.fetch(shard_id, shard, offset)
        return shard.read_record(offset)

    def assemble(self, rank_batch: RankBatch) -> Batch:
        """Read the records of one round."""
        indices = list(self.plan.batches[rank_batch.batch_index])
        records = [self._read(g) for g in indices]
        token_count = int(sum(int(self.index.token_lengths[g]) for g in indices))
        return Batch(
            records=records,
            indices=indices,
            token_count=token_count,
            is_dummy=rank_batch.is_dummy,
            round_index=rank_batch.round_index,
            batch_index=rank_batch.batch_index,
        )

    def _produce(self) -> None:
        try:
            for rank_batch in self._pending:
                batch = self.assemble(rank_batch)
                if not self._put(batch):
                    return
                logger.debug(f"Prefetched round {rank_batch.round_index} (batch {rank_batch.batch_index})")
            self._put(END_OF_EPOCH)
        except Exception as e:  # handed to the consumer
            self._put(e)

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def next_batch(self) -> Union[Batch, EndOfEpoch]:
        """
        Return the next batch, or END_OF_EPOCH after the last round.

        Raises:
            Exception: Any error raised while reading, re-raised in the caller
        """
        if self.prefetch_depth <= 0:
            if self._position >= len(self._pending):
                return END_OF_EPOCH
            batch = self.assemble(self._pending[self._position])
            self._position += 1
            return batch

        if self._thread is None:
            self._queue = queue.Queue(maxsize=self.prefetch_depth)
            self._thread = threading.Thread(target=self._produce, name="hetpar-prefetch", daemon=True)
            self._thread.start()

        if self._position > len(self._pending):
            return END_OF_EPOCH
        item = self._queue.get()
        self._position += 1
        if isinstance(item, Exception):
            self._position = len(self._pending) + 1
            raise item
        return item

    def __iter__(self):
        while True:
            batch = self.next_batch()
            if batch is END_OF_EPOCH:
                return
            yield batch

    def close(self) -> None:
        """Stop the prefetcher and release its thread."""
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
        if self.cache is not None:
            logger.debug(f"Cache hits={self.cache.hits} misses={self.cache.misses}")
