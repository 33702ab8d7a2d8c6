"""Exception hierarchy shared across the engine."""


class HetparError(Exception):
    """Base class for every error raised by the engine."""


class ConfigurationError(HetparError, ValueError):
    """Invalid or inconsistent configuration."""


class UnsupportedConfigurationError(HetparError):
    """Configuration that is valid but cannot be executed."""


class DimensionError(HetparError, ValueError):
    """Tensor shapes or dtypes do not agree."""


class NumericError(HetparError, ArithmeticError):
    """A NaN or infinity surfaced in a tensor, loss or gradient."""


class RecordIndexError(HetparError, IndexError):
    """Record, instance or class index out of range."""


class ShardFormatError(HetparError):
    """Shard file is corrupt or has an unrecognized header."""


class SchemaMismatchError(HetparError):
    """Records or shards disagree on their field schema."""


class CorpusTooSmallError(HetparError, ValueError):
    """Corpus cannot produce the requested sentence pairs."""


class CommError(HetparError):
    """Base class for collective communication failures."""


class CollectiveTimeoutError(CommError, TimeoutError):
    """Peers did not arrive within the configured timeout."""


class DuplicateRankError(CommError):
    """Two participants claimed the same rank."""


class HandshakeError(CommError):
    """Protocol version or world size disagreement during rendezvous."""


class SequenceMismatchError(CommError):
    """Participants disagree on the collective being executed."""


class PeerDisconnectedError(CommError):
    """A peer closed its connection or aborted the run."""


class CheckpointError(HetparError):
    """Checkpoint cannot be read or written."""


class DigestMismatchError(CheckpointError):
    """Stored checkpoint digest does not match its contents."""


class ContractViolationError(HetparError):
    """An operation was invoked by a participant not allowed to call it."""


class ParameterDivergenceError(HetparError):
    """Ranks hold different parameters after a synchronized update."""


class AccumulatorEmptyError(HetparError):
    """Flush requested before any micro-step was accumulated."""
