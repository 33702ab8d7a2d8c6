"""Self-describing binary shard files.

Layout (little-endian)::

    "HSD1" | u16 version | u16 field count F
    F × (u8 name length | name | u8 dtype code | u8 rank)
    u64 record count R | u64 token-length table offset
    R × (per field: u32 dims[rank] | payload)
    u64 record offsets[R] | u32 token lengths[R]

The offset table sits immediately before the token-length table.
"""

import logging
import os
import struct
import tempfile
import threading
from dataclasses import dataclass
from typing import BinaryIO, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from hetpar.errors import RecordIndexError, SchemaMismatchError, ShardFormatError
from hetpar.services.codec import code_dtype, dtype_code, pack_array, unpack_array

logger = logging.getLogger(__name__)

SHARD_MAGIC = b"HSD1"
SHARD_VERSION = 1

Record = Dict[str, np.ndarray]


@dataclass(frozen=True)
class FieldSchema:
    """Name, element type and rank of one record field."""

    name: str
    dtype: np.dtype
    rank: int


@dataclass(frozen=True)
class ShardMeta:
    """Header and footer of a shard; everything except payloads."""

    fields: Tuple[FieldSchema, ...]
    offsets: np.ndarray
    token_lengths: np.ndarray
    data_end: int

    @property
    def count(self) -> int:
        """Number of records."""
        return len(self.offsets)


def _normalize(value) -> np.ndarray:
    array = np.asarray(value)
    if array.dtype.kind in "iub":
        return array.astype(np.int64)
    if array.dtype in (np.float32, np.float64):
        return array
    raise SchemaMismatchError(f"Unsupported field dtype {array.dtype}")


def infer_schema(record: Mapping[str, np.ndarray]) -> Tuple[FieldSchema, ...]:
    """Field schema of a record, in its key order."""
    schema = []
    for name, value in record.items():
        array = _normalize(value)
        schema.append(FieldSchema(name=name, dtype=np.dtype(array.dtype), rank=array.ndim))
    return tuple(schema)


def default_token_length(record: Mapping[str, np.ndarray]) -> int:
    """Length of the ``tokens`` field, or 1 for records without one."""
    if "tokens" in record:
        return int(np.asarray(record["tokens"]).size)
    return 1


def write_shard(
    records: Sequence[Mapping[str, np.ndarray]],
    path: str,
    token_lengths: Optional[Sequence[int]] = None,
    schema: Optional[Sequence[FieldSchema]] = None,
) -> "ShardReader":
    """
    Write records to a shard file atomically.

    Args:
        records: Records sharing one field schema
        path: Destination file
        token_lengths: Per-record token counts; defaults to the ``tokens`` field length
        schema: Field schema; inferred from the first record when omitted

    Returns:
        Reader over the new shard

    Raises:
        SchemaMismatchError: If a record's fields differ from the schema
    """
    if schema is None:
        schema = infer_schema(records[0]) if records else ()
    schema = tuple(schema)
    if token_lengths is None:
        token_lengths = [default_token_length(r) for r in records]
    if len(token_lengths) != len(records):
        raise ValueError(f"Got {len(token_lengths)} token lengths for {len(records)} records")

    header = bytearray(SHARD_MAGIC)
    header += struct.pack("<HH", SHARD_VERSION, len(schema))
    for field in schema:
        name = field.name.encode("utf-8")
        header += struct.pack("<B", len(name)) + name + struct.pack("<BB", dtype_code(field.dtype), field.rank)
    header_size = len(header) + 16

    body = []
    offsets = []
    position = header_size
    for index, record in enumerate(records):
        if list(record.keys()) != [f.name for f in schema]:
            raise SchemaMismatchError(f"Record {index} has fields {list(record.keys())}, expected {[f.name for f in schema]}")
        chunk = []
        for field in schema:
            array = _normalize(record[field.name])
            if array.dtype != field.dtype or array.ndim != field.rank:
                raise SchemaMismatchError(
                    f"Record {index} field {field.name}: {array.dtype}/{array.ndim}-d, expected {field.dtype}/{field.rank}-d"
                )
            chunk.append(pack_array(array))
        encoded = b"".join(chunk)
        offsets.append(position)
        position += len(encoded)
        body.append(encoded)

    count = len(records)
    token_table_offset = position + 8 * count
    header += struct.pack("<QQ", count, token_table_offset)
    footer = np.asarray(offsets, dtype="<u8").tobytes() + np.asarray(token_lengths, dtype="<u4").tobytes()

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".shard-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(bytes(header))
            for encoded in body:
                f.write(encoded)
            f.write(footer)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise

    logger.info(f"Wrote shard {path} with {count} records")
    return ShardReader(path)


def read_meta(f: BinaryIO, path: str) -> ShardMeta:
    """Parse header and footer from an open shard file."""
    magic = f.read(4)
    if magic != SHARD_MAGIC:
        raise ShardFormatError(f"{path}: unrecognized magic {magic!r}")
    try:
        version, n_fields = struct.unpack("<HH", f.read(4))
        if version != SHARD_VERSION:
            raise ShardFormatError(f"{path}: unsupported shard version {version}")
        fields = []
        for _ in range(n_fields):
            (name_len,) = struct.unpack("<B", f.read(1))
            name = f.read(name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", f.read(2))
            fields.append(FieldSchema(name=name, dtype=code_dtype(code), rank=rank))
        count, token_table_offset = struct.unpack("<QQ", f.read(16))
    except struct.error as e:
        raise ShardFormatError(f"{path}: truncated header ({e})")

    header_end = f.tell()
    size = f.seek(0, os.SEEK_END)
    offset_table = token_table_offset - 8 * count
    if offset_table < header_end or token_table_offset + 4 * count > size:
        raise ShardFormatError(
            f"{path}: footer for {count} records at offset {token_table_offset} lies outside the file ({size} bytes)"
        )
    f.seek(offset_table)
    offset_bytes = f.read(8 * count)
    length_bytes = f.read(4 * count)
    if len(offset_bytes) != 8 * count or len(length_bytes) != 4 * count:
        raise ShardFormatError(f"{path}: footer holds fewer than {count} records")
    offsets = np.frombuffer(offset_bytes, dtype="<u8")
    lengths = np.frombuffer(length_bytes, dtype="<u4")
    if count and (int(offsets.min()) < header_end or int(offsets.max()) > offset_table):
        raise ShardFormatError(f"{path}: record offsets outside the data region")
    return ShardMeta(
        fields=tuple(fields),
        offsets=offsets.astype(np.int64),
        token_lengths=lengths.astype(np.int64),
        data_end=offset_table,
    )


class ShardReader:
    """Random-access reader over one shard.

    File handles are opened lazily inside the accessors, one per thread, so
    concurrent readers never share a file position. The constructor only
    records the path.
    """

    def __init__(self, path: str):
        """Initialize the reader; no file is opened here."""
        self.path = path
        self._meta: Optional[ShardMeta] = None
        self._local = threading.local()
        self._lock = threading.Lock()
        self._handles: List[BinaryIO] = []

    @property
    def meta(self) -> ShardMeta:
        """Header and footer, read on first access."""
        if self._meta is None:
            with self._lock:
                if self._meta is None:
                    with open(self.path, "rb") as f:
                        self._meta = read_meta(f, self.path)
        return self._meta

    @property
    def fields(self) -> Tuple[FieldSchema, ...]:
        """Field schema."""
        return self.meta.fields

    @property
    def token_lengths(self) -> np.ndarray:
        """Per-record token counts from the footer."""
        return self.meta.token_lengths

    def __len__(self) -> int:
        return self.meta.count

    def _handle(self) -> BinaryIO:
        handle = getattr(self._local, "handle", None)
        if handle is None:
            handle = open(self.path, "rb")
            self._local.handle = handle
            with self._lock:
                self._handles.append(handle)
        return handle

    def record_span(self, i: int) -> Tuple[int, int]:
        """Byte range [start, end) of record ``i``."""
        meta = self.meta
        if not 0 <= i < meta.count:
            raise RecordIndexError(f"{self.path}: record {i} out of range [0, {meta.count})")
        end = int(meta.offsets[i + 1]) if i + 1 < meta.count else meta.data_end
        return int(meta.offsets[i]), end

    def _decode(self, buf: bytes, offset: int) -> Tuple[Record, int]:
        record: Record = {}
        for field in self.meta.fields:
            record[field.name], offset = unpack_array(buf, offset, field.dtype, field.rank)
        return record, offset

    def read_record(self, i: int) -> Record:
        """
        Read the i-th record.

        Raises:
            RecordIndexError: If i is outside [0, count)
        """
        start, end = self.record_span(i)
        handle = self._handle()
        handle.seek(start)
        record, _ = self._decode(handle.read(end - start), 0)
        return record

    def read_range(self, first: int, last: int) -> List[Record]:
        """Read records [first, last) with a single read."""
        if first >= last:
            return []
        start, _ = self.record_span(first)
        _, end = self.record_span(last - 1)
        handle = self._handle()
        handle.seek(start)
        buf = handle.read(end - start)
        records = []
        offset = 0
        for _ in range(first, last):
            record, offset = self._decode(buf, offset)
            records.append(record)
        return records

    def close(self) -> None:
        """Close every handle opened by any thread."""
        with self._lock:
            for handle in self._handles:
                handle.close()
            self._handles.clear()
        self._local = threading.local()


def read_record(shard: ShardReader, i: int) -> Record:
    """Read record ``i`` of ``shard``."""
    return shard.read_record(i)


def describe_shard(path: str, full: bool = False) -> Dict[str, object]:
    """
    Summarize a shard from its header and footer.

    With ``full`` every record is decoded and its field shapes listed.

    Raises:
        ShardFormatError: On unrecognized magic or version
    """
    reader = ShardReader(path)
    try:
        meta = reader.meta
        lengths = meta.token_lengths
        summary: Dict[str, object] = {
            "format": "shard",
            "version": SHARD_VERSION,
            "records": meta.count,
            "fields": [{"name": f.name, "dtype": str(f.dtype), "rank": f.rank} for f in meta.fields],
            "tokens": int(lengths.sum()) if meta.count else 0,
            "max_tokens": int(lengths.max()) if meta.count else 0,
        }
        if full:
            summary["record_shapes"] = [
                {name: list(value.shape) for name, value in reader.read_record(i).items()} for i in range(meta.count)
            ]
        return summary
    finally:
        reader.close()
