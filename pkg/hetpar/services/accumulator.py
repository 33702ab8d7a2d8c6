"""Delayed-update accumulator: sums micro-step losses, weights and gradients."""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np

from hetpar.errors import AccumulatorEmptyError, ConfigurationError, DimensionError

logger = logging.getLogger(__name__)


@dataclass
class Flushed:
    """Totals handed to the update."""

    loss_sum: float
    weight: float
    grads: Dict[str, np.ndarray]
    micro_steps: int


class Accumulator:
    """Collects K micro-steps before one optimizer update.

    Sums are exact running additions in arrival order; nothing is averaged
    until the engine divides by the global weight.
    """

    def __init__(self, update_freq: int = 1):
        """Initialize an empty accumulator for ``update_freq`` micro-steps."""
        if update_freq < 1:
            raise ConfigurationError(f"update_freq must be at least 1, got {update_freq}")
        self.update_freq = update_freq
        self._reset()

    def _reset(self) -> None:
        self.loss_sum = 0.0
        self.weight = 0.0
        self.grads: Optional[Dict[str, np.ndarray]] = None
        self.micro_steps = 0

    def accumulate(self, loss_sum: float, weight: float, grads: Mapping[str, np.ndarray]) -> None:
        """
        Add one micro-step.

        Raises:
            DimensionError: If gradient names or shapes change between micro-steps
        """
        if self.grads is None:
            self.grads = {name: np.zeros_like(g, dtype=np.float64) for name, g in grads.items()}
        elif set(grads) != set(self.grads):
            raise DimensionError(f"Gradient names changed between micro-steps: {sorted(set(grads) ^ set(self.grads))}")

        for name, g in grads.items():
            if g.shape != self.grads[name].shape:
                raise DimensionError(f"Gradient {name} has shape {g.shape}, accumulated {self.grads[name].shape}")
            self.grads[name] = self.grads[name] + g
        self.loss_sum += loss_sum
        self.weight += weight
        self.micro_steps += 1

    @property
    def ready(self) -> bool:
        """Whether K micro-steps are in."""
        return self.micro_steps >= self.update_freq

    def flush(self) -> Flushed:
        """
        Return the sums and reset.

        Raises:
            AccumulatorEmptyError: If nothing was accumulated
        """
        if self.micro_steps == 0:
            raise AccumulatorEmptyError("flush called before any micro-step was accumulated")
        flushed = Flushed(loss_sum=self.loss_sum, weight=self.weight, grads=self.grads, micro_steps=self.micro_steps)
        self._reset()
        return flushed
