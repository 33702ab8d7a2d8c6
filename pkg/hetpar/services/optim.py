"""Plain gradient descent and bias-corrected Adam over named numpy parameters."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from hetpar.errors import ConfigurationError, DimensionError, NumericError
from hetpar.schemas.run import RunConfig

logger = logging.getLogger(__name__)

Parameters = Dict[str, np.ndarray]


def _check_gradients(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    if set(params) != set(grads):
        raise DimensionError(f"Gradients do not match parameters: {sorted(set(params) ^ set(grads))}")
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise DimensionError(f"Gradient of {name} has shape {grad.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"Non-finite gradient for parameter {name}")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> Parameters:
    """
    θ ← θ − lr·g for every parameter.

    Raises:
        DimensionError: If shapes disagree
        NumericError: On a non-finite gradient
    """
    _check_gradients(params, grads)
    return {name: (value - lr * grads[name]).astype(value.dtype, copy=False) for name, value in params.items()}


@dataclass
class AdamState:
    """First and second moments per parameter plus the update counter."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray], beta1: float, beta2: float, eps: float) -> "AdamState":
        """Fresh state with zero moments shaped like ``params``."""
        return cls(
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
        )


def adam_step(
    state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float
) -> Tuple[Parameters, AdamState]:
    """
    One Adam update with bias correction.

    Args:
        state: Moments and counter; moments missing for a parameter start at zero
        params: Current parameters
        grads: Normalized gradients
        lr: Learning rate for this update

    Returns:
        (new parameters, new state)

    Raises:
        DimensionError: If shapes disagree
        NumericError: On a non-finite gradient
    """
    _check_gradients(params, grads)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t

    new_params: Parameters = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = (value - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype, copy=False)
        new_m[name] = m.astype(value.dtype, copy=False)
        new_v[name] = v.astype(value.dtype, copy=False)

    return new_params, AdamState(beta1=b1, beta2=b2, eps=state.eps, t=t, m=new_m, v=new_v)


class Optimizer:
    """Base class; ``step`` returns the updated parameters."""

    kind = ""

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> Parameters:
        """Apply one update (to be implemented by subclasses)."""
        raise NotImplementedError

    @property
    def updates(self) -> int:
        """Number of updates applied so far."""
        raise NotImplementedError


class Sgd(Optimizer):
    """Stateless gradient descent."""

    kind = "sgd"

    def __init__(self):
        self._updates = 0

    def step(self, params, grads, lr):
        updated = sgd_step(params, grads, lr)
        self._updates += 1
        return updated

    @property
    def updates(self) -> int:
        return self._updates

    def state_dict(self) -> Dict[str, object]:
        return {"kind": self.kind, "t": self._updates}

    def load_state_dict(self, state: Mapping[str, object]) -> None:
        self._updates = int(state["t"])


class Adam(Optimizer):
    """Adam holding its moment state between updates."""

    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, params, grads, lr):
        updated, self.state = adam_step(self.state, params, grads, lr)
        return updated

    @property
    def updates(self) -> int:
        return self.state.t

    def state_dict(self) -> Dict[str, object]:
        return {"kind": self.kind, "t": self.state.t, "m": dict(self.state.m), "v": dict(self.state.v)}

    def load_state_dict(self, state: Mapping[str, object]) -> None:
        self.state = AdamState(
            beta1=self.state.beta1,
            beta2=self.state.beta2,
            eps=self.state.eps,
            t=int(state["t"]),
            m=dict(state.get("m", {})),
            v=dict(state.get("v", {})),
        )


def build_optimizer(config: RunConfig, params: Optional[Mapping[str, np.ndarray]] = None) -> Optimizer:
    """
    Optimizer named by ``config.optimizer``.

    Args:
        config: Run config
        params: Parameters to shape the Adam moments; moments start lazily otherwise
    """
    if config.optimizer == "sgd":
        return Sgd()
    if config.optimizer == "adam":
        optimizer = Adam(config.beta1, config.beta2, config.eps)
        if params is not None:
            optimizer.state = AdamState.zeros(params, config.beta1, config.beta2, config.eps)
        return optimizer
    raise ConfigurationError(f"Unknown optimizer: {config.optimizer}")
