"""Star-topology TCP backend: rank 0 accepts every peer and relays collectives.

Frame (little-endian)::

    u32 payload length | u8 opcode | u32 sequence | u16 rank | payload

HELLO carries u16 protocol version, u16 world size, u16 rank. A refused
handshake is answered with an ERROR frame whose UTF-8 payload is
``<kind>: <message>``.
"""

import logging
import socket
import struct
import time
from typing import Dict, List, Optional, Tuple

import numpy as np
from tenacity import Retrying, retry_if_exception_type, stop_after_delay, wait_exponential

from hetpar.errors import (
    CollectiveTimeoutError,
    CommError,
    DuplicateRankError,
    HandshakeError,
    PeerDisconnectedError,
    SequenceMismatchError,
)
from hetpar.services.process_group import ProcessGroup, fold_in_rank_order

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
FRAME_HEADER = struct.Struct("<IBIH")
HELLO_PAYLOAD = struct.Struct("<HHH")

HELLO = 1
BROADCAST = 2
REDUCE_CONTRIB = 3
REDUCE_RESULT = 4
GATHER = 5
BARRIER = 6
BYE = 7
ERROR = 8

OPCODE_NAMES = {
    HELLO: "HELLO",
    BROADCAST: "BROADCAST",
    REDUCE_CONTRIB: "REDUCE_CONTRIB",
    REDUCE_RESULT: "REDUCE_RESULT",
    GATHER: "GATHER",
    BARRIER: "BARRIER",
    BYE: "BYE",
    ERROR: "ERROR",
}

ERROR_KINDS = {
    "duplicate-rank": DuplicateRankError,
    "handshake": HandshakeError,
    "sequence": SequenceMismatchError,
    "abort": PeerDisconnectedError,
}


def encode_frame(opcode: int, sequence: int, rank: int, payload: bytes = b"") -> bytes:
    """Serialize one frame."""
    return FRAME_HEADER.pack(len(payload), opcode, sequence, rank) + payload


def encode_error(kind: str, message: str) -> bytes:
    """ERROR payload naming the error kind."""
    return f"{kind}: {message}".encode("utf-8")


def decode_error(payload: bytes) -> CommError:
    """Exception matching an ERROR payload."""
    text = payload.decode("utf-8", errors="replace")
    kind, _, message = text.partition(": ")
    return ERROR_KINDS.get(kind, PeerDisconnectedError)(message or text)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        try:
            chunk = sock.recv(min(remaining, 1 << 20))
        except socket.timeout:
            raise CollectiveTimeoutError(f"No data from peer within {sock.gettimeout()}s")
        except OSError as e:
            raise PeerDisconnectedError(f"Connection failed: {e}")
        if not chunk:
            raise PeerDisconnectedError("Peer closed the connection")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Tuple[int, int, int, bytes]:
    """
    Read one frame.

    Returns:
        (opcode, sequence, rank, payload)
    """
    length, opcode, sequence, rank = FRAME_HEADER.unpack(_recv_exact(sock, FRAME_HEADER.size))
    payload = _recv_exact(sock, length) if length else b""
    return opcode, sequence, rank, payload


def send_frame(sock: socket.socket, frame: bytes) -> None:
    """Send a frame, mapping socket failures to comm errors."""
    try:
        sock.sendall(frame)
    except socket.timeout:
        raise CollectiveTimeoutError(f"Send did not complete within {sock.gettimeout()}s")
    except OSError as e:
        raise PeerDisconnectedError(f"Connection failed: {e}")


class TcpProcessGroup(ProcessGroup):
    """One rank of a TCP world.

    The master holds one connection per peer; peers hold one connection to
    the master. Reductions are gathered at the master, folded in rank order
    and sent back, so every rank receives the same bytes.
    """

    def __init__(self, rank: int, world_size: int, timeout: float) -> None:
        super().__init__(rank, world_size, timeout)
        self._peers: Dict[int, socket.socket] = {}
        self._master: Optional[socket.socket] = None
        self._listener: Optional[socket.socket] = None
        self._closed = False

    # Rendezvous

    @classmethod
    def connect(cls, host: str, port: int, rank: int, world_size: int, timeout: float) -> "TcpProcessGroup":
        """
        Join the world at ``host:port``; rank 0 listens there.

        Raises:
            DuplicateRankError: If two peers claim the same rank
            HandshakeError: On protocol version or world-size mismatch
            CollectiveTimeoutError: If the world does not fill in time
        """
        group = cls(rank, world_size, timeout)
        try:
            if group.is_master:
                group._accept_peers(host, port)
            else:
                group._join_master(host, port)
        except Exception:
            group.close()
            raise
        logger.info(f"[rank {rank}] Joined tcp world of {world_size} at {host}:{port}")
        return group

    def _accept_peers(self, host: str, port: int) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(self.world_size)
        self._listener = listener

        deadline = time.monotonic() + self.timeout
        while len(self._peers) < self.world_size - 1:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise CollectiveTimeoutError(
                    f"Rendezvous timed out after {self.timeout}s with ranks {sorted([0, *self._peers])} of {self.world_size}"
                )
            listener.settimeout(remaining)
            try:
                conn, address = listener.accept()
            except socket.timeout:
                continue
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn.settimeout(self.timeout)
            self._admit(conn, address)

        for peer_rank, conn in sorted(self._peers.items()):
            send_frame(conn, encode_frame(HELLO, 0, 0, HELLO_PAYLOAD.pack(PROTOCOL_VERSION, self.world_size, peer_rank)))

    def _admit(self, conn: socket.socket, address) -> None:
        opcode, _, _, payload = read_frame(conn)
        if opcode != HELLO or len(payload) != HELLO_PAYLOAD.size:
            self._refuse(conn, "handshake", f"expected HELLO from {address}, got opcode {opcode}")
            return
        version, world_size, rank = HELLO_PAYLOAD.unpack(payload)
        if version != PROTOCOL_VERSION:
            self._refuse(conn, "handshake", f"protocol version {version}, master speaks {PROTOCOL_VERSION}")
            return
        if world_size != self.world_size:
            self._refuse(conn, "handshake", f"world_size {world_size}, master has {self.world_size}")
            return
        if rank >= self.world_size:
            self._refuse(conn, "handshake", f"rank {rank} outside [1, {self.world_size}) for world_size {self.world_size}")
            return
        if rank == 0 or rank in self._peers:
            message = f"rank {rank} was claimed twice"
            self._refuse(conn, "duplicate-rank", message)
            if rank in self._peers:
                send_frame(self._peers.pop(rank), encode_frame(ERROR, 0, 0, encode_error("duplicate-rank", message)))
                raise DuplicateRankError(message)
            return
        logger.debug(f"[rank 0] Accepted rank {rank} from {address}")
        self._peers[rank] = conn

    def _refuse(self, conn: socket.socket, kind: str, message: str) -> None:
        logger.error(f"[rank 0] Refused peer: {message}")
        try:
            send_frame(conn, encode_frame(ERROR, 0, 0, encode_error(kind, message)))
        finally:
            conn.close()

    def _join_master(self, host: str, port: int) -> None:
        try:
            for attempt in Retrying(
                stop=stop_after_delay(self.timeout),
                wait=wait_exponential(multiplier=0.05, max=1.0),
                retry=retry_if_exception_type(ConnectionError),
                reraise=True,
            ):
                with attempt:
                    conn = socket.create_connection((host, port), timeout=self.timeout)
        except ConnectionError as e:
            raise CollectiveTimeoutError(f"Master {host}:{port} unreachable after {self.timeout}s: {e}")
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn.settimeout(self.timeout)
        self._master = conn

        hello = HELLO_PAYLOAD.pack(PROTOCOL_VERSION, self.world_size, self.rank)
        send_frame(conn, encode_frame(HELLO, 0, self.rank, hello))
        opcode, _, _, payload = read_frame(conn)
        if opcode == ERROR:
            raise decode_error(payload)
        if opcode != HELLO:
            raise HandshakeError(f"Expected HELLO acknowledgement, got opcode {opcode}")

    # Framing

    def _expect(self, sock: socket.socket, opcode: int, sequence: int, source: int) -> bytes:
        got, got_sequence, got_rank, payload = read_frame(sock)
        if got == ERROR:
            raise decode_error(payload)
        if got == BYE:
            raise PeerDisconnectedError(f"Rank {source} left during {OPCODE_NAMES[opcode]} #{sequence}")
        if got != opcode or got_sequence != sequence:
            raise SequenceMismatchError(
                f"Expected {OPCODE_NAMES[opcode]} #{sequence} from rank {source}, "
                f"got {OPCODE_NAMES.get(got, got)} #{got_sequence} from rank {got_rank}"
            )
        logger.debug(f"[rank {self.rank}] recv {OPCODE_NAMES[opcode]} #{sequence} from rank {source}")
        return payload

    def _send(self, sock: socket.socket, opcode: int, sequence: int, payload: bytes = b"") -> None:
        send_frame(sock, encode_frame(opcode, sequence, self.rank, payload))

    def _to_all_peers(self, opcode: int, sequence: int, payload: bytes = b"") -> None:
        frame = encode_frame(opcode, sequence, self.rank, payload)
        for _, conn in sorted(self._peers.items()):
            send_frame(conn, frame)

    # Collectives

    def broadcast(self, payload: bytes, root: int = 0) -> bytes:
        self._check_root(root)
        sequence = self._next_sequence()
        if self.world_size == 1:
            return bytes(payload)

        if self.is_master:
            data = bytes(payload) if root == 0 else self._expect(self._peers[root], BROADCAST, sequence, root)
            self._to_all_peers(BROADCAST, sequence, data)
            return data

        if self.rank == root:
            self._send(self._master, BROADCAST, sequence, bytes(payload))
        return self._expect(self._master, BROADCAST, sequence, 0)

    def all_reduce_sum(self, vector: np.ndarray) -> np.ndarray:
        sequence = self._next_sequence()
        contribution = np.ascontiguousarray(vector, dtype="<f8").reshape(-1)
        if self.world_size == 1:
            return fold_in_rank_order([contribution])

        if self.is_master:
            contributions = [contribution]
            for peer_rank in range(1, self.world_size):
                payload = self._expect(self._peers[peer_rank], REDUCE_CONTRIB, sequence, peer_rank)
                contributions.append(np.frombuffer(payload, dtype="<f8"))
            total = fold_in_rank_order(contributions)
            self._to_all_peers(REDUCE_RESULT, sequence, total.astype("<f8").tobytes())
            return total

        self._send(self._master, REDUCE_CONTRIB, sequence, contribution.tobytes())
        payload = self._expect(self._master, REDUCE_RESULT, sequence, 0)
        return np.frombuffer(payload, dtype="<f8").astype(np.float64)

    def gather_scalars(self, value: float) -> List[float]:
        sequence = self._next_sequence()
        if self.is_master:
            values = [float(value)]
            for peer_rank in range(1, self.world_size):
                payload = self._expect(self._peers[peer_rank], GATHER, sequence, peer_rank)
                values.append(struct.unpack("<d", payload)[0])
            return values

        self._send(self._master, GATHER, sequence, struct.pack("<d", float(value)))
        return []

    def barrier(self) -> None:
        sequence = self._next_sequence()
        if self.world_size == 1:
            return
        if self.is_master:
            for peer_rank in range(1, self.world_size):
                self._expect(self._peers[peer_rank], BARRIER, sequence, peer_rank)
            self._to_all_peers(BARRIER, sequence)
            return
        self._send(self._master, BARRIER, sequence)
        self._expect(self._master, BARRIER, sequence, 0)

    # Teardown

    def abort(self, reason: str) -> None:
        frame = encode_frame(ERROR, self.sequence, self.rank, encode_error("abort", f"rank {self.rank}: {reason}"))
        targets = list(self._peers.values()) if self.is_master else [self._master]
        for conn in targets:
            if conn is None:
                continue
            try:
                conn.sendall(frame)
            except OSError:
                pass

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        connections = list(self._peers.values()) + ([self._master] if self._master else [])
        for conn in connections:
            try:
                conn.sendall(encode_frame(BYE, self.sequence, self.rank))
            except OSError:
                pass
            conn.close()
        self._peers.clear()
        self._master = None
        if self._listener is not None:
            self._listener.close()
            self._listener = None
