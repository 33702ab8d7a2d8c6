"""Differentiable primitives over numpy arrays.

Each primitive computes its output eagerly and, when any input is traced,
records a backward rule on the shared tape. Outputs are checked for NaN and
infinity before they are returned.
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from hetpar.errors import ConfigurationError, DimensionError, RecordIndexError
from hetpar.services.autograd import Tensor, as_tensor, ensure_finite, tape_of
from hetpar.services.rng import SeededRng

TensorLike = Union[Tensor, np.ndarray]


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    ensure_finite(data, op)
    out = Tensor(data)
    tape = tape_of(*inputs)
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise DimensionError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """
    Matrix product of a [m×k] and b [k×n].

    Raises:
        DimensionError: On rank, inner dimension or dtype mismatch
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    _check_same_dtype("matmul", a, b)

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", (a, b), a.data @ b.data, backward_fn)


def transpose(a: TensorLike) -> Tensor:
    """Swap the two axes of a matrix."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d operand, got {a.shape}")
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.T), lambda g: (g.T,))


def add(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise sum of equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    _check_same_dtype("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def add_bias(x: TensorLike, bias: TensorLike) -> Tensor:
    """Add a [d] bias to every row of x [n×d]."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias expects [n×d] and [d], got {x.shape} and {bias.shape}")
    _check_same_dtype("add_bias", x, bias)
    return _emit("add_bias", (x, bias), x.data + bias.data, lambda g: (g, g.sum(axis=0)))


def scale(a: TensorLike, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    a = as_tensor(a)
    c = a.dtype.type(factor)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a: TensorLike) -> Tensor:
    """Elementwise max(x, 0)."""
    a = as_tensor(a)
    positive = a.data > 0
    return _emit("relu", (a,), np.where(positive, a.data, 0).astype(a.dtype), lambda g: (g * positive,))


def softmax_rows(m: TensorLike) -> Tensor:
    """
    Row-wise softmax computed with per-row max subtraction.

    Args:
        m: Finite matrix [r×c]

    Returns:
        Matrix whose rows sum to one
    """
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-d operand, got {m.shape}")
    ensure_finite(m.data, "softmax_rows input")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", (m,), y, backward_fn)


def embedding(table: TensorLike, ids: Sequence[int]) -> Tensor:
    """
    Gather rows of ``table`` [V×d] at ``ids``; also used to select hidden rows.

    Raises:
        RecordIndexError: On an id outside [0, V)
    """
    table = as_tensor(table)
    index = np.asarray(ids, dtype=np.int64).reshape(-1)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise RecordIndexError(f"embedding id out of range [0, {table.shape[0]}): {index.tolist()}")

    def backward_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _emit("embedding", (table,), table.data[index], backward_fn)


def concat_rows(parts: Sequence[TensorLike]) -> Tensor:
    """Stack matrices with equal column counts vertically."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_rows needs at least one part")
    _check_same_dtype("concat_rows", *parts)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward_fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_rows", parts, np.concatenate([p.data for p in parts], axis=0), backward_fn)


def concat_cols(parts: Sequence[TensorLike]) -> Tensor:
    """Join matrices with equal row counts side by side."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_cols needs at least one part")
    _check_same_dtype("concat_cols", *parts)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", parts, np.concatenate([p.data for p in parts], axis=1), backward_fn)


def dropout(x: TensorLike, rate: float, rng: Optional[SeededRng]) -> Tensor:
    """
    Inverted dropout; kept entries are scaled by 1 / (1 - rate).

    A rate of zero (or no generator) returns ``x`` unchanged.
    """
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"Dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or rng is None:
        return x
    keep = rng.random_array(x.data.size).reshape(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _emit("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def label_smoothed_cross_entropy(
    logits: TensorLike, targets: Sequence[int], epsilon: float = 0.0
) -> Tuple[Tensor, int]:
    """
    Summed label-smoothed cross entropy.

    Per instance: (1 − ε)·(−log p_target) + (ε / V)·Σ_c(−log p_c).

    Args:
        logits: Unnormalized scores [n×V]
        targets: Class index per row
        epsilon: Smoothing in [0, 1)

    Returns:
        (unnormalized loss sum as a scalar tensor, instance count n)

    Raises:
        RecordIndexError: On a target outside [0, V)
        ConfigurationError: On epsilon outside [0, 1)
    """
    logits = as_tensor(logits)
    target = np.asarray(targets, dtype=np.int64).reshape(-1)
    if not 0.0 <= epsilon < 1.0:
        raise ConfigurationError(f"Label smoothing must be in [0, 1), got {epsilon}")
    if logits.data.ndim != 2 or logits.shape[0] != target.size:
        raise DimensionError(f"Logits {logits.shape} do not match {target.size} targets")
    n, vocab = logits.shape
    if target.size and (target.min() < 0 or target.max() >= vocab):
        raise RecordIndexError(f"Target out of range [0, {vocab}): {target.tolist()}")

    ensure_finite(logits.data, "cross entropy input")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    nll = -log_p[rows, target]
    smooth = -log_p.sum(axis=1)
    total = ((1.0 - epsilon) * nll + (epsilon / vocab) * smooth).sum()

    def backward_fn(g):
        soft_target = np.full_like(log_p, epsilon / vocab)
        soft_target[rows, target] += 1.0 - epsilon
        return ((np.exp(log_p) - soft_target) * g,)

    loss = _emit("label_smoothed_cross_entropy", (logits,), np.asarray(total, dtype=logits.dtype), backward_fn)
    return loss, n
