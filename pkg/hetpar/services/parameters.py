"""Parameter initialization, state-dictionary codec and digests."""

import hashlib
import logging
import math
import struct
from typing import Dict, Mapping, Tuple

import numpy as np

from hetpar.errors import CheckpointError, ShardFormatError
from hetpar.schemas.model import ModelSpec
from hetpar.services.codec import code_dtype, dtype_code, pack_array, unpack_array
from hetpar.services.rng import SeededRng

logger = logging.getLogger(__name__)

Parameters = Dict[str, np.ndarray]


def init_parameters(spec: ModelSpec, rng: SeededRng) -> Parameters:
    """
    Initialize every parameter of ``spec``.

    Weights draw uniform(−a, a) with a = 1/√fan_in in declaration order;
    biases are zero.

    Args:
        spec: Model spec
        rng: Generator consumed in parameter declaration order

    Returns:
        Parameters by name
    """
    from hetpar.models import build_model

    model = build_model(spec)
    params: Parameters = {}
    for name, pspec in model.parameter_specs().items():
        size = int(np.prod(pspec.shape))
        if pspec.fan_in is None:
            values = np.zeros(size, dtype=np.float64)
        else:
            bound = 1.0 / math.sqrt(pspec.fan_in)
            values = rng.uniform_array(size, -bound, bound)
        params[name] = values.reshape(pspec.shape).astype(model.dtype)

    logger.debug(f"Initialized {len(params)} parameters for {spec.arch}")
    return params


def write_tensor_block(name: str, array: np.ndarray) -> bytes:
    """u16 name length, name, u8 dtype code, u8 rank, u32 dims, payload."""
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded + struct.pack("<BB", dtype_code(array.dtype), array.ndim)
    return header + pack_array(array)


def read_tensor_block(buf: bytes, offset: int) -> Tuple[str, np.ndarray, int]:
    """
    Inverse of ``write_tensor_block``.

    Returns:
        (name, array, offset after the block)
    """
    (name_len,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    name = bytes(buf[offset:offset + name_len]).decode("utf-8")
    offset += name_len
    code, rank = struct.unpack_from("<BB", buf, offset)
    offset += 2
    array, offset = unpack_array(buf, offset, code_dtype(code), rank)
    return name, array, offset


def export_state_dict(params: Mapping[str, np.ndarray]) -> bytes:
    """Serialize parameters as a u32 count followed by tensor blocks in name order."""
    parts = [struct.pack("<I", len(params))]
    for name in sorted(params):
        parts.append(write_tensor_block(name, params[name]))
    return b"".join(parts)


def read_state_dict(buf: bytes, offset: int = 0) -> Tuple[Parameters, int]:
    """
    Read a state dictionary starting at ``offset``.

    Returns:
        (parameters, offset after the last block)

    Raises:
        CheckpointError: If the buffer ends inside a block
    """
    try:
        (count,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        params: Parameters = {}
        for _ in range(count):
            name, array, offset = read_tensor_block(buf, offset)
            params[name] = array
    except (struct.error, ShardFormatError) as e:
        raise CheckpointError(f"Truncated state dictionary: {e}")
    return params, offset


def import_state_dict(buf: bytes) -> Parameters:
    """
    Inverse of ``export_state_dict``.

    Raises:
        CheckpointError: On trailing or missing bytes
    """
    params, offset = read_state_dict(buf)
    if offset != len(buf):
        raise CheckpointError(f"State dictionary has {len(buf) - offset} trailing bytes")
    return params


def parameter_digest(params: Mapping[str, np.ndarray]) -> str:
    """sha256 over names, dtypes, shapes and payloads in name order."""
    digest = hashlib.sha256()
    for name in sorted(params):
        array = np.ascontiguousarray(params[name])
        digest.update(name.encode())
        digest.update(str(array.dtype).encode())
        digest.update(str(array.shape).encode())
        digest.update(array.tobytes())
    return digest.hexdigest()
