"""Bit-exact training checkpoints.

Layout (little-endian)::

    "HCK1" | u16 version | u64 epoch N | u64 step P | u64 seed S | u8 weight policy
    u32 spec length | canonical JSON spec (model, optimizer, scheduler, update_freq, world_size)
    parameters: u32 count, tensor blocks in name order
    optimizer: u8 kind; for adam the m and v state dictionaries; u64 update count t
    u64 FNV-1a digest of every preceding byte
"""

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Dict, List, Optional

import numpy as np

from hetpar.errors import CheckpointError, ContractViolationError, DigestMismatchError
from hetpar.schemas.model import ModelSpec
from hetpar.schemas.run import RunConfig
from hetpar.services.codec import code_dtype, fnv1a_64
from hetpar.services.parameters import Parameters, export_state_dict, read_state_dict

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HCK1"
CHECKPOINT_VERSION = 1
HEADER = struct.Struct("<4sHQQQB")
WEIGHT_POLICIES = ("sentences", "tokens")
OPTIMIZER_KINDS = ("sgd", "adam")


@dataclass
class TrainState:
    """Everything a rank needs to continue training bit-exactly."""

    params: Parameters
    epoch: int
    step: int
    seed: int
    model_spec: ModelSpec
    weight_policy: str = "sentences"
    optimizer: Dict[str, Any] = field(default_factory=lambda: {"kind": "sgd"})
    optimizer_state: Dict[str, Any] = field(default_factory=lambda: {"kind": "sgd", "t": 0})
    scheduler: Dict[str, Any] = field(default_factory=dict)
    update_freq: int = 1
    world_size: int = 1

    def spec_block(self) -> Dict[str, Any]:
        """Configuration persisted in the JSON block."""
        return {
            "model": self.model_spec.model_dump(),
            "optimizer": self.optimizer,
            "scheduler": self.scheduler,
            "update_freq": self.update_freq,
            "world_size": self.world_size,
        }


def optimizer_config(config: RunConfig) -> Dict[str, Any]:
    """Optimizer hyperparameters stored in a checkpoint."""
    if config.optimizer == "adam":
        return {"kind": "adam", "beta1": config.beta1, "beta2": config.beta2, "eps": config.eps}
    return {"kind": "sgd"}


def scheduler_config(config: RunConfig) -> Dict[str, Any]:
    """Schedule settings stored in a checkpoint."""
    return {
        "kind": config.scheduler,
        "peak_lr": config.peak_lr,
        "warmup_steps": config.warmup_steps,
        "total_steps": config.schedule_total_steps,
        "d_model": config.d_model,
    }


def encode_checkpoint(state: TrainState) -> bytes:
    """Serialize ``state``; identical states give identical bytes."""
    if state.weight_policy not in WEIGHT_POLICIES:
        raise CheckpointError(f"Unknown weight policy {state.weight_policy!r}")
    kind = state.optimizer_state.get("kind", "sgd")
    if kind not in OPTIMIZER_KINDS:
        raise CheckpointError(f"Unknown optimizer kind {kind!r}")

    spec = json.dumps(state.spec_block(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        HEADER.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            state.epoch,
            state.step,
            state.seed,
            WEIGHT_POLICIES.index(state.weight_policy),
        ),
        struct.pack("<I", len(spec)),
        spec,
        export_state_dict(state.params),
        struct.pack("<B", OPTIMIZER_KINDS.index(kind)),
    ]
    if kind == "adam":
        parts.append(export_state_dict(state.optimizer_state["m"]))
        parts.append(export_state_dict(state.optimizer_state["v"]))
    parts.append(struct.pack("<Q", int(state.optimizer_state.get("t", 0))))

    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a_64(body))


def _check_header(buf: bytes, source: str):
    if len(buf) < HEADER.size or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: unrecognized format (magic {bytes(buf[:4])!r})")
    header = HEADER.unpack_from(buf, 0)
    if header[1] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {header[1]}")
    return header


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> TrainState:
    """
    Parse checkpoint bytes.

    Raises:
        CheckpointError: On unrecognized magic or version
        DigestMismatchError: If the footer digest does not match, e.g. a truncated file
    """
    _, _, epoch, step, seed, policy = _check_header(buf, source)
    if len(buf) < HEADER.size + 8:
        raise DigestMismatchError(f"{source}: file too short for a digest")
    stored = struct.unpack_from("<Q", buf, len(buf) - 8)[0]
    actual = fnv1a_64(buf[:-8])
    if stored != actual:
        raise DigestMismatchError(f"{source}: digest {stored:016x} does not match contents {actual:016x}")

    try:
        offset = HEADER.size
        (spec_len,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        spec = json.loads(bytes(buf[offset:offset + spec_len]).decode("utf-8"))
        offset += spec_len
        params, offset = read_state_dict(buf, offset)
        (kind_code,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        kind = OPTIMIZER_KINDS[kind_code]
        optimizer_state: Dict[str, Any] = {"kind": kind}
        if kind == "adam":
            optimizer_state["m"], offset = read_state_dict(buf, offset)
            optimizer_state["v"], offset = read_state_dict(buf, offset)
        (optimizer_state["t"],) = struct.unpack_from("<Q", buf, offset)
        offset += 8
    except (struct.error, IndexError, ValueError) as e:
        raise CheckpointError(f"{source}: malformed checkpoint body ({e})")
    if offset != len(buf) - 8:
        raise CheckpointError(f"{source}: {len(buf) - 8 - offset} unexpected bytes before the digest")

    return TrainState(
        params=params,
        epoch=epoch,
        step=step,
        seed=seed,
        model_spec=ModelSpec(**spec["model"]),
        weight_policy=WEIGHT_POLICIES[policy],
        optimizer=spec["optimizer"],
        optimizer_state=optimizer_state,
        scheduler=spec["scheduler"],
        update_freq=spec["update_freq"],
        world_size=spec["world_size"],
    )


def save_checkpoint(state: TrainState, path: str, rank: int = 0) -> str:
    """
    Write ``state`` atomically (temporary file, then rename). Master only.

    Args:
        state: State to persist
        path: Destination file
        rank: Caller's rank

    Returns:
        The path written

    Raises:
        ContractViolationError: If a non-master rank calls it
    """
    if rank != 0:
        raise ContractViolationError(f"Only the master writes checkpoints; rank {rank} tried to write {path}")

    data = encode_checkpoint(state)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".checkpoint-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise

    logger.info(f"Saved checkpoint {path} (epoch {state.epoch}, step {state.step})")
    return path


def read_checkpoint_bytes(path: str) -> bytes:
    """Raw checkpoint bytes, for the broadcast path."""
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")


def load_checkpoint(path: str) -> TrainState:
    """
    Load and verify a checkpoint file.

    Raises:
        CheckpointError: If the file is unreadable or malformed
        DigestMismatchError: On a digest mismatch
    """
    state = decode_checkpoint(read_checkpoint_bytes(path), path)
    logger.info(f"Loaded checkpoint {path} (epoch {state.epoch}, step {state.step}, seed {state.seed})")
    return state


def _skip_state_dict(f: BinaryIO) -> List[Dict[str, Any]]:
    (count,) = struct.unpack("<I", f.read(4))
    inventory = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", f.read(2))
        name = f.read(name_len).decode("utf-8")
        code, rank = struct.unpack("<BB", f.read(2))
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
        dtype = code_dtype(code)
        f.seek(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize, os.SEEK_CUR)
        inventory.append({"name": name, "dtype": str(dtype), "shape": list(dims)})
    return inventory


def describe_checkpoint(path: str, full: bool = False) -> Dict[str, Any]:
    """
    Summarize a checkpoint.

    Without ``full`` only headers are read and payloads are skipped by seeking;
    with ``full`` the file is loaded, its digest verified and per-parameter
    norms added.

    Raises:
        CheckpointError: On unrecognized magic or a malformed header
    """
    with open(path, "rb") as f:
        head = f.read(HEADER.size)
        _, version, epoch, step, seed, policy = _check_header(head, path)
        try:
            (spec_len,) = struct.unpack("<I", f.read(4))
            spec = json.loads(f.read(spec_len).decode("utf-8"))
            inventory = _skip_state_dict(f)
            f.seek(-8, os.SEEK_END)
            (digest,) = struct.unpack("<Q", f.read(8))
        except (struct.error, ValueError) as e:
            raise CheckpointError(f"{path}: malformed checkpoint header ({e})")

    summary: Dict[str, Any] = {
        "format": "checkpoint",
        "version": version,
        "epoch": epoch,
        "step": step,
        "seed": seed,
        "weight_policy": WEIGHT_POLICIES[policy] if policy < len(WEIGHT_POLICIES) else policy,
        "spec": spec,
        "parameters": inventory,
        "digest": f"{digest:016x}",
    }
    if full:
        state = load_checkpoint(path)
        for entry in inventory:
            entry["norm"] = float(np.linalg.norm(state.params[entry["name"]]))
        summary["optimizer_updates"] = int(state.optimizer_state.get("t", 0))
        summary["digest_verified"] = True
    return summary


def state_from_config(
    config: RunConfig,
    params: Parameters,
    optimizer_state: Optional[Dict[str, Any]] = None,
    epoch: int = 0,
    step: int = 0,
) -> TrainState:
    """TrainState for a run configured by ``config``."""
    return TrainState(
        params=params,
        epoch=epoch,
        step=step,
        seed=config.seed,
        model_spec=config.model_spec(),
        weight_policy=config.weight_policy,
        optimizer=optimizer_config(config),
        optimizer_state=optimizer_state or {"kind": config.optimizer, "t": 0},
        scheduler=scheduler_config(config),
        update_freq=config.update_freq,
        world_size=config.world_size,
    )
