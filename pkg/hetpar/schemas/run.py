"""Run configuration and report schemas."""

from typing import Any, Dict, Iterable, List, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from hetpar.config import settings
from hetpar.schemas.model import Architecture, ModelSpec

LIST_FIELDS = ("data", "hidden")


class RunConfig(BaseModel):
    """Fully resolved configuration of one rank's run.

    Keys are flat so the whole config is a key=value file; unknown keys are
    rejected.
    """

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # Randomness
    seed: int = Field(default=0, ge=0, lt=2**64)

    # Process group
    world_size: int = Field(default=1, ge=1)
    rank: int = Field(default=0, ge=0)
    backend: Literal["inproc", "tcp"] = "inproc"  # inproc keeps the whole suite in one process
    master_addr: str = "127.0.0.1"
    master_port: int = 29500
    comm_timeout: float = Field(default_factory=lambda: settings.HETPAR_COMM_TIMEOUT, gt=0)

    # Data
    task: Literal["synthetic-classify", "synthetic-sequence", "mlm-nsp"] = "synthetic-classify"
    data: List[str] = []
    n_instances: int = Field(default=1000, ge=1)
    n_shards: int = Field(default=4, ge=1)
    max_sentences: int = Field(default=32, ge=1)
    max_tokens: int = Field(default=0, ge=0)  # 0 disables the token cap
    weight_policy: Literal["sentences", "tokens"] = "sentences"
    prefetch_depth: int = Field(default_factory=lambda: settings.HETPAR_PREFETCH_DEPTH, ge=0)
    cache_bytes: int = Field(default_factory=lambda: settings.HETPAR_CACHE_BYTES, ge=0)
    cache_block_bytes: int = Field(default_factory=lambda: settings.HETPAR_CACHE_BLOCK_BYTES, ge=1)
    cache_policy: Literal["lru", "lfu"] = "lru"
    borrow_dummy: bool = True

    # Model
    arch: Architecture = "mlp"
    d_in: int = Field(default=20, ge=1)
    hidden: List[int] = [64]
    n_classes: int = Field(default=5, ge=2)
    vocab_size: int = Field(default=64, ge=8)
    d_model: int = Field(default=32, ge=2)
    n_heads: int = Field(default=2, ge=1)
    d_ff: int = Field(default=64, ge=1)
    max_seq_len: int = Field(default=32, ge=4)
    dropout: float = 0.0
    label_smoothing: float = 0.0
    nsp_head: bool = True
    dtype: Literal["f32", "f64"] = "f64"

    # Optimizer and schedule
    optimizer: Literal["sgd", "adam"] = "sgd"
    peak_lr: float = Field(default=0.1, ge=0)
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    scheduler: Literal["constant", "inverse_sqrt", "linear"] = "constant"
    warmup_steps: int = Field(default=4000, ge=1)
    total_steps: int = Field(default=0, ge=0)  # 0 means max_steps
    update_freq: int = Field(default=1, ge=1)

    # Run length and persistence
    max_steps: int = Field(default=100, ge=0)
    max_epochs: int = Field(default=0, ge=0)  # 0 means unlimited
    checkpoint_interval: int = Field(default=0, ge=0)
    checkpoint_dir: str = Field(default_factory=lambda: settings.HETPAR_CHECKPOINT_DIR)
    checkpoint_broadcast: bool = False
    resume: str = ""
    report: str = ""
    consistency_interval: int = Field(default_factory=lambda: settings.HETPAR_CONSISTENCY_INTERVAL, ge=0)

    @field_validator(*LIST_FIELDS, mode="before")
    @classmethod
    def _split_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        if self.rank >= self.world_size:
            raise ValueError(f"rank {self.rank} must be less than world_size {self.world_size}")
        if self.scheduler == "linear" and self.warmup_steps >= self.schedule_total_steps:
            raise ValueError(
                f"linear schedule needs warmup_steps < total_steps, got {self.warmup_steps} >= {self.schedule_total_steps}"
            )
        self.model_spec()
        return self

    @property
    def schedule_total_steps(self) -> int:
        """Horizon of the linear schedule."""
        return self.total_steps or self.max_steps

    def model_spec(self) -> ModelSpec:
        """Model fields as a ModelSpec."""
        return ModelSpec(
            arch=self.arch,
            d_in=self.d_in,
            hidden=self.hidden,
            n_classes=self.n_classes,
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            max_seq_len=self.max_seq_len,
            dropout=self.dropout,
            label_smoothing=self.label_smoothing,
            nsp_head=self.nsp_head,
            dtype=self.dtype,
        )

    def to_lines(self) -> List[str]:
        """Serialize as ``key=value`` lines in field order."""
        lines = []
        for key, value in self.model_dump().items():
            lines.append(f"{key}={format_value(value)}")
        return lines

    @classmethod
    def from_lines(cls, lines: Iterable[str], **overrides: Any) -> "RunConfig":
        """Parse ``key=value`` lines; ``overrides`` win over the lines."""
        values = parse_key_values(lines)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def format_value(value: Any) -> str:
    """Render one config value for a key=value file."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_key_values(lines: Iterable[str]) -> Dict[str, str]:
    """
    Parse a flat key=value text.

    Blank lines and lines starting with ``#`` are skipped.

    Raises:
        ValueError: On a line without ``=``
    """
    values: Dict[str, str] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"Line {number} is not key=value: {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


class StepReport(BaseModel):
    """Outcome of one optimizer update."""

    step: int
    epoch: int
    loss: float
    weight: float = Field(ge=0)
    duration: float
    rank_durations: List[float] = []


class RunReport(BaseModel):
    """Summary of a rank's run plus the config that produced it."""

    config: RunConfig
    world_size: int
    steps: int
    epochs_completed: int
    total_time: float
    avg_step_time: float
    final_loss: float
    step_losses: List[float] = []
    checkpoints: List[str] = []


class ScalingRow(BaseModel):
    """One row of a scaling table."""

    nodes: int = 1
    ranks: int
    epochs: int
    steps: int
    avg_step: float
    training_time: float
    loss: float
    expansion: float
    speedup: float
