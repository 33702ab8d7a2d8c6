"""Little-endian binary helpers shared by shards, checkpoints and the wire protocol."""

import struct
from typing import Tuple

import numpy as np

from hetpar.errors import ShardFormatError

# dtype codes used in shard and checkpoint headers
DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF


def dtype_code(dtype: np.dtype) -> int:
    """Code of a supported dtype."""
    key = np.dtype(dtype).newbyteorder("<")
    if key not in DTYPE_CODES:
        raise ValueError(f"Unsupported dtype {dtype}, expected float32, float64 or int64")
    return DTYPE_CODES[key]


def code_dtype(code: int) -> np.dtype:
    """Dtype for a header code."""
    if code not in CODE_DTYPES:
        raise ShardFormatError(f"Unknown dtype code {code}")
    return CODE_DTYPES[code]


def pack_array(array: np.ndarray, dims_format: str = "<I") -> bytes:
    """u32 dims followed by the little-endian payload."""
    dims = b"".join(struct.pack(dims_format, d) for d in array.shape)
    little = np.ascontiguousarray(array, dtype=np.dtype(array.dtype).newbyteorder("<"))
    return dims + little.tobytes()


def unpack_array(buf: bytes, offset: int, dtype: np.dtype, rank: int) -> Tuple[np.ndarray, int]:
    """
    Read dims and payload written by ``pack_array``.

    Returns:
        (array, offset after the payload)
    """
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(buf):
        raise ShardFormatError(f"Payload of {nbytes} bytes runs past the end of the buffer")
    array = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims).copy()
    return array.astype(dtype.newbyteorder("="), copy=False), offset + nbytes


def fnv1a_64(data: bytes, state: int = FNV_OFFSET) -> int:
    """
    64-bit FNV-1a digest; pass ``state`` to continue a running digest.

    Eight bytes per iteration, masked to 64 bits once per word; the low 64
    bits of xor and multiply never depend on higher bits.
    """
    view = memoryview(data).cast("B")
    whole = len(view) - len(view) % 8
    h = state
    p = FNV_PRIME
    words = iter(view[:whole])
    for b0, b1, b2, b3, b4, b5, b6, b7 in zip(words, words, words, words, words, words, words, words):
        h = ((((((((((((((((h ^ b0) * p) ^ b1) * p) ^ b2) * p) ^ b3) * p) ^ b4) * p) ^ b5) * p) ^ b6) * p) ^ b7) * p) & MASK64
    for byte in view[whole:]:
        h = ((h ^ byte) * p) & MASK64
    return h
