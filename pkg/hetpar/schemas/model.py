"""Model specification schema."""

from typing import List, Literal

from pydantic import BaseModel, ConfigDict, model_validator

Architecture = Literal["mlp", "attention_classifier", "masked_token_model"]


class ModelSpec(BaseModel):
    """Architecture and sizes; every parameter shape derives from these fields."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    arch: Architecture = "mlp"
    d_in: int = 20  # mlp input features
    hidden: List[int] = [64]  # mlp hidden layer sizes
    n_classes: int = 5
    vocab_size: int = 64
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    max_seq_len: int = 32
    dropout: float = 0.0
    label_smoothing: float = 0.0
    nsp_head: bool = True
    dtype: Literal["f32", "f64"] = "f64"

    @model_validator(mode="after")
    def _check_sizes(self) -> "ModelSpec":
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.arch != "mlp":
            if self.d_model % 2 != 0:
                raise ValueError(f"d_model must be even, got {self.d_model}")
            if self.n_heads < 1 or self.d_model % self.n_heads != 0:
                raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self
