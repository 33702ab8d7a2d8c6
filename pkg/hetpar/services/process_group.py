"""Process groups: world/rank identity plus deterministic collectives."""

import logging
import threading
from abc import ABC, abstractmethod
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from hetpar.errors import (
    CollectiveTimeoutError,
    ConfigurationError,
    DimensionError,
    DuplicateRankError,
    PeerDisconnectedError,
    SequenceMismatchError,
)
from hetpar.schemas.run import RunConfig

logger = logging.getLogger(__name__)


def fold_in_rank_order(contributions: Sequence[np.ndarray]) -> np.ndarray:
    """
    Sum vectors starting from zeros, adding rank 0 first.

    Every backend reduces through this function, so the result bytes only
    depend on the inputs, never on arrival order.

    Raises:
        DimensionError: If contributions differ in length
    """
    lengths = {len(c) for c in contributions}
    if len(lengths) != 1:
        raise DimensionError(f"all_reduce contributions differ in length: {[len(c) for c in contributions]}")
    total = np.zeros(lengths.pop(), dtype=np.float64)
    for contribution in contributions:
        total = total + np.asarray(contribution, dtype=np.float64)
    return total


class ProcessGroup(ABC):
    """A participant's view of the world.

    Collectives are blocking and must be called by every rank in the same
    order; each call consumes one sequence number.
    """

    def __init__(self, rank: int, world_size: int, timeout: float) -> None:
        if world_size < 1:
            raise ConfigurationError(f"world_size must be at least 1, got {world_size}")
        if not 0 <= rank < world_size:
            raise ConfigurationError(f"rank {rank} outside [0, {world_size})")
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout
        self.sequence = 0

    @property
    def is_master(self) -> bool:
        """Rank 0 is the master."""
        return self.rank == 0

    def _next_sequence(self) -> int:
        self.sequence += 1
        return self.sequence

    def _check_root(self, root: int) -> None:
        if not 0 <= root < self.world_size:
            raise ConfigurationError(f"root {root} outside [0, {self.world_size})")

    @abstractmethod
    def broadcast(self, payload: bytes, root: int = 0) -> bytes:
        """Return the root's bytes on every rank; other ranks' payloads are ignored."""

    @abstractmethod
    def all_reduce_sum(self, vector: np.ndarray) -> np.ndarray:
        """Sum float64 vectors over ranks in rank order; identical bytes everywhere."""

    @abstractmethod
    def gather_scalars(self, value: float) -> List[float]:
        """Master receives every rank's value in rank order; others get an empty list."""

    @abstractmethod
    def barrier(self) -> None:
        """Return once every rank has entered."""

    @abstractmethod
    def abort(self, reason: str) -> None:
        """Make peers fail fast instead of waiting for this rank."""

    @abstractmethod
    def close(self) -> None:
        """Release the group; safe to call twice."""

    def __repr__(self) -> str:
        return f"{type(self).__name__}(rank={self.rank}, world_size={self.world_size})"


class SingleProcessGroup(ProcessGroup):
    """World of one: every collective is the identity."""

    def __init__(self, timeout: float = 30.0) -> None:
        super().__init__(0, 1, timeout)

    def broadcast(self, payload: bytes, root: int = 0) -> bytes:
        self._check_root(root)
        self._next_sequence()
        return bytes(payload)

    def all_reduce_sum(self, vector: np.ndarray) -> np.ndarray:
        self._next_sequence()
        return fold_in_rank_order([vector])

    def gather_scalars(self, value: float) -> List[float]:
        self._next_sequence()
        return [float(value)]

    def barrier(self) -> None:
        self._next_sequence()

    def abort(self, reason: str) -> None:
        pass

    def close(self) -> None:
        pass


class InprocRendezvous:
    """Shared meeting point for ranks running as threads of one process.

    Contributions are grouped by sequence number. The last rank to arrive
    combines them; the slot is dropped once every rank has taken the result.
    """

    def __init__(self, world_size: int, timeout: float = 30.0):
        """Initialize an empty rendezvous for ``world_size`` ranks."""
        self.world_size = world_size
        self.timeout = timeout
        self._cond = threading.Condition()
        self._joined: List[int] = []
        self._duplicates: set = set()
        self._slots: Dict[int, Dict[str, Any]] = {}
        self._aborted: Optional[str] = None

    def _raise_if_aborted(self) -> None:
        if self._aborted is not None:
            raise PeerDisconnectedError(f"Run aborted: {self._aborted}")

    def abort(self, reason: str) -> None:
        """Wake every waiting rank with a PeerDisconnectedError."""
        with self._cond:
            if self._aborted is None:
                self._aborted = reason
                logger.debug(f"Rendezvous aborted: {reason}")
            self._cond.notify_all()

    def join(self, rank: int) -> None:
        """
        Register ``rank`` and wait until every rank has joined.

        Raises:
            DuplicateRankError: If another participant claimed the same rank (raised on both)
            CollectiveTimeoutError: If the world does not fill in time
        """
        with self._cond:
            self._raise_if_aborted()
            if rank in self._joined:
                self._duplicates.add(rank)
                self._cond.notify_all()
                raise DuplicateRankError(f"Rank {rank} was claimed twice")
            self._joined.append(rank)
            self._cond.notify_all()

            complete = self._cond.wait_for(
                lambda: len(self._joined) == self.world_size
                or rank in self._duplicates
                or self._aborted is not None,
                timeout=self.timeout,
            )
            if rank in self._duplicates:
                raise DuplicateRankError(f"Rank {rank} was claimed twice")
            self._raise_if_aborted()
            if not complete:
                raise CollectiveTimeoutError(
                    f"Rendezvous timed out after {self.timeout}s with ranks {sorted(self._joined)} of {self.world_size}"
                )

    def collective(
        self,
        sequence: int,
        op: str,
        rank: int,
        payload: Any,
        combine: Callable[[List[Any]], Any],
    ) -> Any:
        """
        Contribute ``payload`` to collective ``sequence`` and wait for the result.

        Raises:
            SequenceMismatchError: If ranks run different collectives at the same sequence number
            CollectiveTimeoutError: If a peer does not arrive in time
            PeerDisconnectedError: If the rendezvous was aborted
        """
        with self._cond:
            self._raise_if_aborted()
            slot = self._slots.setdefault(sequence, {"op": op, "items": {}, "done": False, "taken": 0})
            if slot["op"] != op:
                reason = f"sequence {sequence}: rank {rank} runs {op}, peers run {slot['op']}"
                self._aborted = reason
                self._cond.notify_all()
                raise SequenceMismatchError(reason)

            slot["items"][rank] = payload
            if len(slot["items"]) == self.world_size:
                try:
                    slot["result"] = combine([slot["items"][r] for r in range(self.world_size)])
                except Exception as e:
                    slot["error"] = e
                slot["done"] = True
                self._cond.notify_all()
            else:
                finished = self._cond.wait_for(lambda: slot["done"] or self._aborted is not None, timeout=self.timeout)
                if not slot["done"]:
                    self._raise_if_aborted()
                    if not finished:
                        missing = sorted(set(range(self.world_size)) - set(slot["items"]))
                        reason = f"{op} #{sequence} timed out after {self.timeout}s waiting for ranks {missing}"
                        self._aborted = reason
                        self._cond.notify_all()
                        raise CollectiveTimeoutError(reason)

            slot["taken"] += 1
            if slot["taken"] == self.world_size:
                del self._slots[sequence]
            if "error" in slot:
                raise slot["error"]
            return slot["result"]


class InprocProcessGroup(ProcessGroup):
    """Rank running as a thread; collectives meet in an InprocRendezvous."""

    def __init__(self, rendezvous: InprocRendezvous, rank: int) -> None:
        super().__init__(rank, rendezvous.world_size, rendezvous.timeout)
        self.rendezvous = rendezvous
        self._closed = False

    def _run(self, op: str, payload: Any, combine: Callable[[List[Any]], Any]) -> Any:
        sequence = self._next_sequence()
        logger.debug(f"[rank {self.rank}] {op} #{sequence}")
        return self.rendezvous.collective(sequence, op, self.rank, payload, combine)

    def broadcast(self, payload: bytes, root: int = 0) -> bytes:
        self._check_root(root)
        result = self._run(f"broadcast:{root}", bytes(payload), lambda items: items[root])
        return bytes(result)

    def all_reduce_sum(self, vector: np.ndarray) -> np.ndarray:
        contribution = np.array(vector, dtype=np.float64).reshape(-1)
        return self._run("all_reduce", contribution, fold_in_rank_order).copy()

    def gather_scalars(self, value: float) -> List[float]:
        values = self._run("gather", float(value), list)
        return list(values) if self.is_master else []

    def barrier(self) -> None:
        self._run("barrier", None, lambda items: None)

    def abort(self, reason: str) -> None:
        self.rendezvous.abort(f"rank {self.rank}: {reason}")

    def close(self) -> None:
        self._closed = True


def init_process_group(config: RunConfig, rendezvous: Optional[InprocRendezvous] = None) -> ProcessGroup:
    """
    Join the world described by ``config`` and return once every rank has joined.

    Args:
        config: Run config naming backend, world size, rank and for tcp the master address
        rendezvous: Shared rendezvous of the inproc backend

    Returns:
        ProcessGroup for this rank

    Raises:
        ConfigurationError: If an inproc world larger than one has no rendezvous
        DuplicateRankError: If the rank is claimed twice
        HandshakeError: On protocol or world-size disagreement (tcp)
        CollectiveTimeoutError: If peers do not join in time
    """
    if config.backend == "tcp":
        from hetpar.services.tcp import TcpProcessGroup

        return TcpProcessGroup.connect(
            config.master_addr, config.master_port, config.rank, config.world_size, config.comm_timeout
        )

    if rendezvous is None:
        if config.world_size != 1:
            raise ConfigurationError("The inproc backend needs a shared rendezvous for world_size > 1")
        return SingleProcessGroup(config.comm_timeout)
    if rendezvous.world_size != config.world_size:
        raise ConfigurationError(
            f"Rendezvous is for world_size {rendezvous.world_size}, config says {config.world_size}"
        )

    rendezvous.join(config.rank)
    logger.info(f"[rank {config.rank}] Joined inproc world of {config.world_size}")
    return InprocProcessGroup(rendezvous, config.rank)
