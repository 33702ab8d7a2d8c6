"""Scaled dot-product and multi-head attention, sinusoidal positions."""

import math
from typing import Mapping

import numpy as np

from hetpar.errors import ConfigurationError, DimensionError
from hetpar.services.autograd import Tensor, as_tensor, constant
from hetpar.services.ops import TensorLike, concat_cols, matmul, scale, softmax_rows, transpose


def scaled_dot_product_attention(q: TensorLike, k: TensorLike, v: TensorLike) -> Tensor:
    """
    softmax(Q Kᵀ / √d_k) · V.

    Every output row is a convex combination of the rows of V.

    Args:
        q: Queries [n×d_k]
        k: Keys [m×d_k]
        v: Values [m×d_v]

    Returns:
        Attended values [n×d_v]

    Raises:
        DimensionError: If q/k widths or k/v row counts differ
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError(f"attention expects 2-d operands, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"q and k widths differ: {q.shape[1]} vs {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"k and v row counts differ: {k.shape[0]} vs {v.shape[0]}")

    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return matmul(softmax_rows(scores), v)


def head_parameter_names(prefix: str, heads: int):
    """Names of the per-head projections and the output projection."""
    names = []
    for i in range(heads):
        names.extend([f"{prefix}.wq.{i}", f"{prefix}.wk.{i}", f"{prefix}.wv.{i}"])
    names.append(f"{prefix}.wo")
    return names


def multi_head_attention(
    x_q: TensorLike,
    x_k: TensorLike,
    x_v: TensorLike,
    params: Mapping[str, TensorLike],
    heads: int,
    prefix: str = "attn",
) -> Tensor:
    """
    Concat(head_1, …, head_h) · W^O with head_i = Attention(x_q W_i^Q, x_k W_i^K, x_v W_i^V).

    Args:
        x_q: Query-side inputs [n×d_model]
        x_k: Key-side inputs [m×d_model]
        x_v: Value-side inputs [m×d_model]
        params: Projection tensors named ``{prefix}.wq.{i}``, ``wk.{i}``, ``wv.{i}`` and ``{prefix}.wo``
        heads: Head count h
        prefix: Parameter name prefix

    Returns:
        Output [n×d_model]

    Raises:
        ConfigurationError: If d_model is not divisible by h
    """
    x_q = as_tensor(x_q)
    d_model = x_q.shape[1]
    if heads < 1 or d_model % heads != 0:
        raise ConfigurationError(f"Model dimension {d_model} is not divisible by {heads} heads")

    outputs = []
    for i in range(heads):
        q = matmul(x_q, params[f"{prefix}.wq.{i}"])
        k = matmul(x_k, params[f"{prefix}.wk.{i}"])
        v = matmul(x_v, params[f"{prefix}.wv.{i}"])
        outputs.append(scaled_dot_product_attention(q, k, v))

    joined = outputs[0] if heads == 1 else concat_cols(outputs)
    return matmul(joined, params[f"{prefix}.wo"])


def sinusoidal_positions(seq_len: int, d_model: int, dtype: str = "float64") -> Tensor:
    """
    Fixed positional table: sin(pos / 10000^(2i/d)) at even columns, cos at odd.

    Raises:
        ConfigurationError: If d_model is odd
    """
    if d_model % 2 != 0:
        raise ConfigurationError(f"Positional embedding needs an even model dimension, got {d_model}")

    position = np.arange(seq_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = position / np.power(10000.0, two_i / d_model)
    table = np.empty((seq_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return constant(table, dtype)
