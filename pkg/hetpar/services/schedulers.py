"""Learning-rate schedules indexed by optimizer update (1-based)."""

import logging
from typing import Callable

from hetpar.errors import ConfigurationError
from hetpar.schemas.run import RunConfig

logger = logging.getLogger(__name__)

Schedule = Callable[[int], float]


def constant_lr(step: int, peak: float) -> float:
    """Fixed learning rate."""
    return peak


def inverse_sqrt_lr(step: int, d_model: int, warmup_steps: int) -> float:
    """
    d_model^-0.5 · min(step^-0.5, step · warmup^-1.5).

    Rises linearly for ``warmup_steps`` updates, then decays with the
    inverse square root of the step.

    Args:
        step: Optimizer update, at least 1
        d_model: Model width
        warmup_steps: Warmup length, at least 1

    Raises:
        ConfigurationError: If step or warmup_steps is below 1
    """
    if step < 1:
        raise ConfigurationError(f"inverse_sqrt_lr is undefined at step {step}; steps start at 1")
    if warmup_steps < 1:
        raise ConfigurationError(f"warmup_steps must be at least 1, got {warmup_steps}")
    return d_model**-0.5 * min(step**-0.5, step * warmup_steps**-1.5)


def linear_warmup_decay_lr(step: int, peak: float, warmup_steps: int, total_steps: int) -> float:
    """
    Linear warmup to ``peak`` then linear decay to zero at ``total_steps``.

    Steps past the total clamp to 0 with a warning.

    Raises:
        ConfigurationError: If warmup_steps >= total_steps or step < 0
    """
    if warmup_steps >= total_steps:
        raise ConfigurationError(f"warmup_steps {warmup_steps} must be less than total_steps {total_steps}")
    if step < 0:
        raise ConfigurationError(f"step must be non-negative, got {step}")
    if step > total_steps:
        logger.warning(f"Step {step} is past the schedule end {total_steps}; learning rate clamped to 0")
        return 0.0
    if warmup_steps > 0 and step <= warmup_steps:
        return peak * (step / warmup_steps)
    return peak * ((total_steps - step) / (total_steps - warmup_steps))


def build_scheduler(config: RunConfig) -> Schedule:
    """Schedule named by ``config.scheduler``, as a function of the update number."""
    if config.scheduler == "constant":
        return lambda step: constant_lr(step, config.peak_lr)
    if config.scheduler == "inverse_sqrt":
        return lambda step: inverse_sqrt_lr(step, config.d_model, config.warmup_steps)
    if config.scheduler == "linear":
        total = config.schedule_total_steps
        return lambda step: linear_warmup_decay_lr(step, config.peak_lr, config.warmup_steps, total)
    raise ConfigurationError(f"Unknown scheduler: {config.scheduler}")

