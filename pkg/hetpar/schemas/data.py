"""Batch plan and masked-instance schemas."""

from typing import List

from pydantic import BaseModel, ConfigDict


class BatchPlan(BaseModel):
    """Deterministic batches of global instance indices for one epoch."""

    model_config = ConfigDict(frozen=True)

    epoch: int
    seed: int
    batches: List[List[int]]

    @property
    def num_batches(self) -> int:
        """Number of batches in the epoch."""
        return len(self.batches)


class RankBatch(BaseModel):
    """One round of a rank's epoch: a real batch or a dummy."""

    model_config = ConfigDict(frozen=True)

    round_index: int
    batch_index: int  # global batch id; for dummies, the batch borrowed as input
    is_dummy: bool = False


class RankPlan(BaseModel):
    """Per-rank view of a BatchPlan, padded with dummies to equal round counts."""

    model_config = ConfigDict(frozen=True)

    epoch: int
    rank: int
    world_size: int
    rounds: List[RankBatch]

    @property
    def real_batches(self) -> List[int]:
        """Global ids of the non-dummy batches this rank trains on."""
        return [r.batch_index for r in self.rounds if not r.is_dummy]


class MaskedInstance(BaseModel):
    """A [CLS] A [SEP] B [SEP] training instance with masking applied."""

    tokens: List[int]
    segments: List[int]
    mask_positions: List[int]
    mask_labels: List[int]
    nsp_label: int
