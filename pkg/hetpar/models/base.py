"""Base model with tracing, weight policy and shape checks."""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from hetpar.errors import DimensionError, NumericError
from hetpar.schemas.model import ModelSpec
from hetpar.services.autograd import Tape, Tensor, resolve_dtype
from hetpar.services.rng import SeededRng

logger = logging.getLogger(__name__)

Record = Mapping[str, np.ndarray]
WEIGHT_POLICIES = ("sentences", "tokens")


@dataclass(frozen=True)
class ParameterSpec:
    """Shape of a named parameter and the fan-in of its initializer.

    A fan-in of None marks a bias, initialized to zero.
    """

    shape: Tuple[int, ...]
    fan_in: Optional[int] = None


@dataclass
class ForwardResult:
    """Unnormalized loss sum, its weight, and the tape for backward."""

    loss_sum: float
    weight: float
    tape: Optional[Tape]
    loss: Tensor


class TrainableModel:
    """Base class for all models; subclasses define parameters and ``_forward``."""

    RECORD_FIELDS: Tuple[str, ...] = ()

    def __init__(self, spec: ModelSpec):
        """Initialize the model from its spec."""
        self.spec = spec
        self.dtype = resolve_dtype(spec.dtype)

    def parameter_specs(self) -> Dict[str, ParameterSpec]:
        """
        Named parameter shapes, in initialization order (to be implemented by subclasses).

        Returns:
            Mapping of parameter name to ParameterSpec
        """
        raise NotImplementedError

    def _forward(
        self,
        params: Mapping[str, Tensor],
        records: Sequence[Record],
        weight_policy: str,
        dropout_rng: Optional[SeededRng],
    ) -> Tuple[Tensor, float]:
        """
        Compute the summed loss and its weight (to be implemented by subclasses).

        Args:
            params: Parameter tensors, traced or constant
            records: Batch records
            weight_policy: sentences or tokens
            dropout_rng: Generator for dropout masks, or None

        Returns:
            (scalar loss tensor, weight)
        """
        raise NotImplementedError

    def model_forward(
        self,
        params: Mapping[str, np.ndarray],
        records: Sequence[Record],
        weight_policy: str = "sentences",
        dropout_rng: Optional[SeededRng] = None,
        trace: bool = True,
    ) -> ForwardResult:
        """
        Run the model on a batch.

        Args:
            params: Parameter arrays by name
            records: Non-empty batch of records
            weight_policy: sentences (instance count) or tokens (token count)
            dropout_rng: Generator for dropout masks; None disables dropout
            trace: Record a tape for backward

        Returns:
            ForwardResult with the unnormalized loss sum

        Raises:
            ValueError: On an empty batch or unknown weight policy
            DimensionError: If parameters do not match the model spec
            NumericError: On a non-finite loss
        """
        if not records:
            raise ValueError("Empty batch; ranks without data go through the dummy-batch path")
        if weight_policy not in WEIGHT_POLICIES:
            raise ValueError(f"Unknown weight policy {weight_policy!r}, expected one of {WEIGHT_POLICIES}")
        self.check_parameters(params)

        if trace:
            tape: Optional[Tape] = Tape()
            leaves = tape.watch_all(params)
        else:
            tape = None
            leaves = {name: Tensor(array) for name, array in params.items()}

        loss, weight = self._forward(leaves, records, weight_policy, dropout_rng)
        loss_sum = loss.item()
        if not np.isfinite(loss_sum):
            raise NumericError(f"Non-finite loss {loss_sum} from {self.spec.arch}")
        return ForwardResult(loss_sum=loss_sum, weight=float(weight), tape=tape, loss=loss)

    def check_parameters(self, params: Mapping[str, np.ndarray]) -> None:
        """Verify names, shapes and dtypes of ``params`` against the model spec."""
        specs = self.parameter_specs()
        if set(specs) != set(params):
            diff = sorted(set(specs) ^ set(params))
            raise DimensionError(f"Parameters do not match {self.spec.arch}: {diff}")
        for name, spec in specs.items():
            array = params[name]
            if tuple(array.shape) != spec.shape:
                raise DimensionError(f"Parameter {name} has shape {array.shape}, expected {spec.shape}")
            if array.dtype != self.dtype:
                raise DimensionError(f"Parameter {name} has dtype {array.dtype}, expected {self.dtype}")

    def zero_loss(self) -> Tensor:
        """Untraced scalar zero of the model dtype."""
        return Tensor(np.zeros((), dtype=self.dtype))

    def check_length(self, tokens: np.ndarray) -> None:
        """Reject sequences longer than the positional table."""
        if len(tokens) > self.spec.max_seq_len:
            raise DimensionError(f"Sequence of length {len(tokens)} exceeds max_seq_len {self.spec.max_seq_len}")
