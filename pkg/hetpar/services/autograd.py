"""Tensor carrier and reverse-mode tape."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from hetpar.errors import DimensionError, NumericError

logger = logging.getLogger(__name__)

SUPPORTED_DTYPES = {"float32": np.float32, "float64": np.float64}

Gradients = Dict[str, np.ndarray]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def resolve_dtype(name: str) -> np.dtype:
    """Map a dtype name (float32/float64, f32/f64) to a numpy dtype."""
    aliases = {"f32": "float32", "f64": "float64"}
    key = aliases.get(name, name)
    if key not in SUPPORTED_DTYPES:
        raise DimensionError(f"Unsupported dtype {name!r}, expected float32 or float64")
    return np.dtype(SUPPORTED_DTYPES[key])


def ensure_finite(array: np.ndarray, what: str) -> np.ndarray:
    """Raise NumericError when ``array`` holds NaN or infinity."""
    if not np.all(np.isfinite(array)):
        raise NumericError(f"Non-finite values produced by {what}")
    return array


class Tensor:
    """Dense row-major array, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "name")

    def __init__(self, data: np.ndarray, tape: Optional["Tape"] = None, name: Optional[str] = None):
        """Wrap ``data``; a tensor with a tape participates in backward."""
        if data.dtype not in (np.float32, np.float64):
            raise DimensionError(f"Tensor dtype must be float32 or float64, got {data.dtype}")
        self.data = data
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        """Dimension sizes."""
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        """Element type."""
        return self.data.dtype

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, traced={self.tape is not None})"


def constant(array: Union[np.ndarray, Sequence], dtype: Union[str, np.dtype] = "float64") -> Tensor:
    """Wrap an array as an untracked tensor."""
    np_dtype = resolve_dtype(dtype) if isinstance(dtype, str) else np.dtype(dtype)
    return Tensor(np.ascontiguousarray(np.asarray(array, dtype=np_dtype)))


def as_tensor(value: Union[Tensor, np.ndarray]) -> Tensor:
    """Pass tensors through; wrap float arrays as constants."""
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value)
    if array.dtype not in (np.float32, np.float64):
        array = array.astype(np.float64)
    return Tensor(array)


@dataclass
class Node:
    """One recorded primitive application."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as primitives run, which is a topological order, so
    replaying the list in reverse visits every node after all its consumers.
    """

    def __init__(self):
        """Initialize an empty tape."""
        self.nodes: List[Node] = []
        self.leaves: Dict[str, Tensor] = {}

    def watch(self, name: str, array: np.ndarray) -> Tensor:
        """Register a named parameter leaf and return its tracked tensor."""
        if name in self.leaves:
            raise DimensionError(f"Parameter {name} watched twice")
        leaf = Tensor(array, tape=self, name=name)
        self.leaves[name] = leaf
        return leaf

    def watch_all(self, params: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
        """Register every parameter and return the tracked tensors by name."""
        return {name: self.watch(name, array) for name, array in params.items()}

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> None:
        """Append a node; the output joins this tape."""
        output.tape = self
        self.nodes.append(Node(op=op, inputs=tuple(inputs), output=output, backward_fn=backward_fn))

    def __len__(self) -> int:
        return len(self.nodes)


def tape_of(*tensors: Tensor) -> Optional[Tape]:
    """Return the tape shared by the traced inputs, if any."""
    tape = None
    for tensor in tensors:
        if tensor.tape is None:
            continue
        if tape is None:
            tape = tensor.tape
        elif tensor.tape is not tape:
            raise DimensionError("Inputs are recorded on different tapes")
    return tape


def backward(tape: Tape, params: Mapping[str, np.ndarray], loss: Optional[Tensor] = None) -> Gradients:
    """
    Replay the tape in reverse and return d(loss)/d(param) per name.

    Args:
        tape: Tape produced by a traced forward pass
        params: Parameters the forward pass watched
        loss: Scalar output to differentiate; defaults to the last node's output

    Returns:
        Gradients with the same names and shapes as ``params``

    Raises:
        DimensionError: If the tape's leaves and ``params`` disagree
    """
    if set(tape.leaves) != set(params):
        missing = sorted(set(params) ^ set(tape.leaves))
        raise DimensionError(f"Tape and parameters disagree on names: {missing}")
    for name, array in params.items():
        if tape.leaves[name].shape != array.shape:
            raise DimensionError(
                f"Parameter {name} shape mismatch: tape {tape.leaves[name].shape}, params {array.shape}"
            )

    if loss is None and tape.nodes:
        loss = tape.nodes[-1].output

    grads: Dict[int, np.ndarray] = {}
    if loss is not None and loss.tape is tape:
        if loss.data.size != 1:
            raise DimensionError(f"Backward needs a scalar loss, got shape {loss.shape}")
        grads[id(loss)] = np.ones_like(loss.data)

        for node in reversed(tape.nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward_fn(upstream)):
                if grad is None or tensor.tape is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

    result: Gradients = {}
    for name, array in params.items():
        grad = grads.get(id(tape.leaves[name]))
        result[name] = np.zeros_like(array) if grad is None else grad.astype(array.dtype, copy=False)
    return result


def zero_gradients(params: Mapping[str, np.ndarray]) -> Gradients:
    """Zero tensor per parameter; the gradient of a dummy batch."""
    return {name: np.zeros_like(array) for name, array in params.items()}


def finite_difference_gradient(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    h: float = 1e-6,
    coordinates: Optional[Mapping[str, Sequence[int]]] = None,
) -> Gradients:
    """
    Central-difference gradient (f(θ+h e_i) − f(θ−h e_i)) / 2h per coordinate.

    Args:
        f: Scalar function of the parameters
        params: Point to differentiate at (left unchanged)
        h: Step size, positive
        coordinates: Optional flat indices per parameter; others are left zero

    Returns:
        Gradients shaped like ``params``
    """
    if h <= 0:
        raise ValueError(f"Step size must be positive, got {h}")

    work = {name: array.copy() for name, array in params.items()}
    result: Gradients = {}
    for name, array in work.items():
        grad = np.zeros_like(array)
        flat = array.reshape(-1)
        indices = range(flat.size) if coordinates is None else coordinates.get(name, [])
        for i in indices:
            original = flat[i]
            flat[i] = original + h
            f_plus = f(work)
            flat[i] = original - h
            f_minus = f(work)
            flat[i] = original
            grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
        result[name] = grad
    return result
