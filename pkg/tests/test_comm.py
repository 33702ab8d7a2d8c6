"""Tests for the process groups and collectives."""

import socket
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from hetpar.errors import (
    CollectiveTimeoutError,
    CommError,
    ConfigurationError,
    DimensionError,
    DuplicateRankError,
    HandshakeError,
    PeerDisconnectedError,
)
from hetpar.schemas.run import RunConfig
from hetpar.services.process_group import (
    InprocProcessGroup,
    InprocRendezvous,
    SingleProcessGroup,
    fold_in_rank_order,
    init_process_group,
)
from hetpar.services.tcp import (
    ERROR,
    HELLO,
    HELLO_PAYLOAD,
    PROTOCOL_VERSION,
    TcpProcessGroup,
    decode_error,
    encode_error,
    encode_frame,
    read_frame,
    send_frame,
)


def run_ranks(world, fn):
    """Call ``fn(rank)`` on one thread per rank; results (or exceptions) in rank order."""
    with ThreadPoolExecutor(max_workers=world) as pool:
        futures = [pool.submit(fn, rank) for rank in range(world)]
        outcomes = []
        for future in futures:
            try:
                outcomes.append(future.result(timeout=60))
            except Exception as e:
                outcomes.append(e)
    return outcomes


def inproc_groups(world, timeout=10.0):
    """Joined inproc groups for every rank."""
    rendezvous = InprocRendezvous(world, timeout)

    def join(rank):
        rendezvous.join(rank)
        return InprocProcessGroup(rendezvous, rank)

    return run_ranks(world, join)


def test_fold_matches_sequential_sum():
    """Test rank-ordered summation bit for bit."""
    rng = np.random.default_rng(0)
    vectors = [rng.standard_normal(100) * 10.0 ** rng.integers(-8, 8) for _ in range(8)]

    expected = np.zeros(100)
    for v in vectors:
        expected = expected + v

    assert fold_in_rank_order(vectors).tobytes() == expected.tobytes()


def test_fold_rejects_length_mismatch():
    """Test that contributions must have equal lengths."""
    with pytest.raises(DimensionError):
        fold_in_rank_order([np.zeros(2), np.zeros(3)])


def test_inproc_all_reduce_is_identical_everywhere():
    """Test that every rank gets the rank-ordered sum."""
    world = 8
    groups = inproc_groups(world)
    rng = np.random.default_rng(1)
    vectors = [rng.standard_normal(50) for _ in range(world)]

    results = run_ranks(world, lambda r: groups[r].all_reduce_sum(vectors[r]))

    expected = fold_in_rank_order(vectors).tobytes()
    assert all(result.tobytes() == expected for result in results)


def test_inproc_broadcast_gather_barrier():
    """Test the remaining collectives in one lockstep sequence."""
    world = 3
    groups = inproc_groups(world)

    def script(rank):
        group = groups[rank]
        data = group.broadcast(f"from {rank}".encode(), root=2)
        group.barrier()
        gathered = group.gather_scalars(float(rank) + 0.5)
        return data, gathered

    results = run_ranks(world, script)

    assert [r[0] for r in results] == [b"from 2"] * 3
    assert results[0][1] == [0.5, 1.5, 2.5]
    assert results[1][1] == [] and results[2][1] == []


def test_single_process_group():
    """Test that a world of one is the identity."""
    group = SingleProcessGroup()

    assert group.broadcast(b"x") == b"x"
    assert group.all_reduce_sum(np.array([1.5, 2.0])).tolist() == [1.5, 2.0]
    assert group.gather_scalars(3.0) == [3.0]
    group.barrier()
    assert group.sequence == 4


def test_duplicate_rank_fails_both_claimants():
    """Test that two participants claiming rank 0 both fail."""
    rendezvous = InprocRendezvous(2, timeout=5.0)

    outcomes = run_ranks(2, lambda _: rendezvous.join(0))

    assert all(isinstance(o, DuplicateRankError) for o in outcomes)


def test_join_timeout():
    """Test that a world that never fills times out."""
    rendezvous = InprocRendezvous(2, timeout=0.2)

    with pytest.raises(CollectiveTimeoutError):
        rendezvous.join(0)


def test_sequence_mismatch_fails_every_rank():
    """Test that ranks running different collectives all fail."""
    groups = inproc_groups(2)

    def script(rank):
        if rank == 0:
            groups[0].barrier()
        else:
            groups[1].broadcast(b"x")

    outcomes = run_ranks(2, script)

    assert all(isinstance(o, CommError) for o in outcomes)


def test_abort_wakes_peers():
    """Test that an abort turns a pending collective into an error."""
    groups = inproc_groups(2, timeout=30.0)

    def script(rank):
        if rank == 0:
            return groups[0].all_reduce_sum(np.zeros(2))
        groups[1].abort("simulated failure")

    outcomes = run_ranks(2, script)

    assert isinstance(outcomes[0], PeerDisconnectedError)


def test_collective_timeout():
    """Test that a missing peer produces a timeout."""
    groups = inproc_groups(2, timeout=0.3)

    with pytest.raises(CollectiveTimeoutError):
        groups[0].barrier()


def test_init_inproc_needs_rendezvous():
    """Test that a larger inproc world needs the shared rendezvous."""
    with pytest.raises(ConfigurationError):
        init_process_group(RunConfig(world_size=2))
    assert isinstance(init_process_group(RunConfig()), SingleProcessGroup)


def test_error_payload_roundtrip():
    """Test that ERROR frames map back to the right exception."""
    assert isinstance(decode_error(encode_error("duplicate-rank", "rank 1")), DuplicateRankError)
    assert isinstance(decode_error(encode_error("handshake", "bad")), HandshakeError)
    assert isinstance(decode_error(b"garbage"), PeerDisconnectedError)


def test_tcp_collectives(free_port):
    """Test the TCP backend against the rank-ordered fold."""
    world = 3
    rng = np.random.default_rng(2)
    vectors = [rng.standard_normal(1000) for _ in range(world)]

    def script(rank):
        group = TcpProcessGroup.connect("127.0.0.1", free_port, rank, world, timeout=20.0)
        try:
            total = group.all_reduce_sum(vectors[rank])
            data = group.broadcast(b"payload-%d" % rank, root=1)
            gathered = group.gather_scalars(rank * 2.0)
            group.barrier()
            return total.tobytes(), data, gathered
        finally:
            group.close()

    results = run_ranks(world, script)

    expected = fold_in_rank_order(vectors).tobytes()
    for rank, result in enumerate(results):
        assert not isinstance(result, Exception), result
        assert result[0] == expected
        assert result[1] == b"payload-1"
        assert result[2] == ([0.0, 2.0, 4.0] if rank == 0 else [])


def test_tcp_world_size_mismatch(free_port):
    """Test that a peer with a different world size is refused."""

    def script(rank):
        if rank == 0:
            return TcpProcessGroup.connect("127.0.0.1", free_port, 0, 2, timeout=2.0)
        return TcpProcessGroup.connect("127.0.0.1", free_port, 1, 3, timeout=2.0)

    outcomes = run_ranks(2, script)

    assert isinstance(outcomes[0], CollectiveTimeoutError)
    assert isinstance(outcomes[1], HandshakeError)


def test_tcp_duplicate_rank(free_port):
    """Test that two peers claiming one rank fail along with the master."""

    def script(index):
        rank = 0 if index == 0 else 1
        return TcpProcessGroup.connect("127.0.0.1", free_port, rank, 3, timeout=5.0)

    outcomes = run_ranks(3, script)

    assert all(isinstance(o, DuplicateRankError) for o in outcomes)


def test_tcp_rank_outside_world(free_port):
    """Test that a peer claiming a rank past the world size gets a handshake error."""

    def script(index):
        if index == 0:
            return TcpProcessGroup.connect("127.0.0.1", free_port, 0, 2, timeout=2.0)
        deadline = time.monotonic() + 2.0
        while True:
            try:
                conn = socket.create_connection(("127.0.0.1", free_port), timeout=2.0)
                break
            except ConnectionError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)
        with conn:
            send_frame(conn, encode_frame(HELLO, 0, 0, HELLO_PAYLOAD.pack(PROTOCOL_VERSION, 2, 5)))
            opcode, _, _, payload = read_frame(conn)
        assert opcode == ERROR
        return decode_error(payload)

    outcomes = run_ranks(2, script)

    assert isinstance(outcomes[0], CollectiveTimeoutError)
    assert isinstance(outcomes[1], HandshakeError)
    assert "outside" in str(outcomes[1])
