"""Tests for the training engine."""

import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from hetpar.errors import (
    CheckpointError,
    ConfigurationError,
    ParameterDivergenceError,
    UnsupportedConfigurationError,
)
from hetpar.models import build_model
from hetpar.services.autograd import backward
from hetpar.services.checkpoint import load_checkpoint, save_checkpoint
from hetpar.services.dataset_index import build_index
from hetpar.services.loader import Batch
from hetpar.services.metrics import read_run_report
from hetpar.services.parameters import init_parameters, parameter_digest
from hetpar.services.process_group import InprocRendezvous
from hetpar.services.rng import SeededRng
from hetpar.worker import FINAL_CHECKPOINT, RankWorker, checkpoint_name, launch_inproc, train_run


def _final(report):
    return load_checkpoint(report.checkpoints[-1])


def _bytes(path):
    with open(path, "rb") as f:
        return f.read()


@pytest.mark.parametrize("world", [4, 8])
def test_world_matches_accumulation(run_config, classify_shards, tmp_path, world):
    """Test that w ranks with K=1 and one rank with K=w train bit-identically."""
    data = classify_shards(n=120)
    common = dict(data=data, max_steps=20)

    spread = launch_inproc(run_config(world_size=world, update_freq=1, checkpoint_dir=str(tmp_path / "w"), **common))
    serial = launch_inproc(run_config(world_size=1, update_freq=world, checkpoint_dir=str(tmp_path / "k"), **common))

    assert len(spread) == world
    assert spread[0].steps == serial[0].steps == 20
    assert spread[0].step_losses == serial[0].step_losses
    assert parameter_digest(_final(spread[0]).params) == parameter_digest(_final(serial[0]).params)
    assert all(r.step_losses == spread[0].step_losses for r in spread)


@pytest.mark.parametrize("world,steps", [(4, 200), (8, 100)])
def test_full_size_run_matches_accumulation_and_learns(run_config, classify_shards, tmp_path, world, steps):
    """Test a 20-64-5 MLP on 1000 instances: ranks vs accumulation, and the loss falling."""
    data = classify_shards(n=1000, n_shards=4, d_in=20, n_classes=5)
    common = dict(data=data, d_in=20, hidden=[64], n_classes=5, max_sentences=32, max_steps=steps, peak_lr=0.1)

    spread = launch_inproc(run_config(world_size=world, checkpoint_dir=str(tmp_path / "w"), **common))
    serial = launch_inproc(run_config(update_freq=world, checkpoint_dir=str(tmp_path / "k"), **common))

    assert spread[0].steps == serial[0].steps == steps
    assert spread[0].step_losses == serial[0].step_losses
    a, b = _final(spread[0]).params, _final(serial[0]).params
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert spread[0].step_losses[-1] < 0.5 * spread[0].step_losses[0]


def test_mixed_world_and_accumulation_match_closely(run_config, classify_shards, tmp_path):
    """Test that world 2 x K=2 stays within rounding of world 1 x K=4."""
    data = classify_shards(n=120)

    mixed = launch_inproc(run_config(data=data, world_size=2, update_freq=2, checkpoint_dir=str(tmp_path / "m")))
    serial = launch_inproc(run_config(data=data, world_size=1, update_freq=4, checkpoint_dir=str(tmp_path / "s")))

    a, b = _final(mixed[0]).params, _final(serial[0]).params
    assert max(float(np.max(np.abs(a[k] - b[k]))) for k in a) <= 1e-12


def test_dummy_rank_step_equals_serial_mean_gradient(run_config, classify_shards):
    """Test one step over batches of 2, 2, 1 and a dummy against the serial mean gradient."""
    data = classify_shards(n=5, n_shards=1)
    config = run_config(data=data, world_size=4, max_sentences=2, max_steps=1, peak_lr=1.0)

    reports = launch_inproc(config)

    model = build_model(config.model_spec())
    initial = init_parameters(config.model_spec(), SeededRng(config.seed))
    index = build_index(data)
    records = [index.read(g) for g in range(5)]
    index.close()
    result = model.model_forward(initial, records)
    serial = backward(result.tape, initial, result.loss)

    final = _final(reports[0]).params
    for name in initial:
        applied = initial[name] - final[name]
        assert np.max(np.abs(applied - serial[name] / 5.0)) <= 1e-12
    assert reports[0].step_losses[0] == pytest.approx(result.loss_sum / 5.0, abs=1e-12)


def test_updates_per_epoch(run_config, classify_shards, tmp_path):
    """Test four batches over two ranks, and over one rank with K=2."""
    data = classify_shards(n=32)
    config = dict(data=data, max_steps=100, max_epochs=1)

    spread = launch_inproc(run_config(world_size=2, checkpoint_dir=str(tmp_path / "a"), **config))
    accumulated = launch_inproc(run_config(update_freq=2, checkpoint_dir=str(tmp_path / "b"), **config))

    assert spread[0].steps == 2
    assert accumulated[0].steps == 2
    assert spread[0].epochs_completed == accumulated[0].epochs_completed == 1


@pytest.mark.parametrize(
    "interval,extra",
    [
        (50, {}),
        (45, {}),
        (50, {"optimizer": "adam", "dropout": 0.2, "peak_lr": 0.01}),
    ],
)
def test_resume_is_bit_identical(run_config, classify_shards, tmp_path, interval, extra):
    """Test that resuming from a checkpoint replays the uninterrupted run exactly."""
    data = classify_shards(n=120)
    full = train_run(
        run_config(data=data, max_steps=100, checkpoint_interval=interval, checkpoint_dir=str(tmp_path / "full"), **extra)
    )
    resume_from = str(tmp_path / "full" / checkpoint_name(interval))

    resumed = train_run(
        run_config(data=data, max_steps=100, resume=resume_from, checkpoint_dir=str(tmp_path / "resumed"), **extra)
    )

    assert full.steps == 100
    assert resumed.steps == 100 - interval
    assert resumed.step_losses == full.step_losses[interval:]
    assert _bytes(str(tmp_path / "full" / FINAL_CHECKPOINT)) == _bytes(str(tmp_path / "resumed" / FINAL_CHECKPOINT))


def test_resume_with_new_world_at_epoch_boundary(run_config, classify_shards, tmp_path):
    """Test that the world may change when the checkpoint closes an epoch."""
    data = classify_shards(n=120)
    train_run(run_config(data=data, max_steps=15, checkpoint_dir=str(tmp_path / "a")))

    reports = launch_inproc(
        run_config(
            data=data,
            world_size=3,
            max_steps=20,
            resume=str(tmp_path / "a" / FINAL_CHECKPOINT),
            checkpoint_dir=str(tmp_path / "b"),
        )
    )

    assert reports[0].steps == 5
    assert _final(reports[0]).epoch == 2


def test_resume_with_new_world_mid_epoch_fails(run_config, classify_shards, tmp_path):
    """Test that a mid-epoch checkpoint cannot change the world size."""
    data = classify_shards(n=120)
    train_run(run_config(data=data, max_steps=7, checkpoint_dir=str(tmp_path / "a")))

    with pytest.raises(UnsupportedConfigurationError):
        launch_inproc(
            run_config(
                data=data,
                world_size=2,
                max_steps=20,
                resume=str(tmp_path / "a" / FINAL_CHECKPOINT),
                checkpoint_dir=str(tmp_path / "b"),
            )
        )


def test_resume_rejects_other_model(run_config, classify_shards, tmp_path):
    """Test that a checkpoint for a different model is refused."""
    data = classify_shards(n=40)
    train_run(run_config(data=data, max_steps=2, checkpoint_dir=str(tmp_path / "a")))

    with pytest.raises(ConfigurationError):
        train_run(
            run_config(
                data=data, hidden=[5], resume=str(tmp_path / "a" / FINAL_CHECKPOINT), checkpoint_dir=str(tmp_path / "b")
            )
        )


def test_broadcast_resume(run_config, classify_shards, tmp_path):
    """Test resuming through the master's broadcast of the checkpoint bytes."""
    data = classify_shards(n=120)
    train_run(run_config(data=data, max_steps=15, checkpoint_dir=str(tmp_path / "a")))
    common = dict(data=data, world_size=2, max_steps=25, resume=str(tmp_path / "a" / FINAL_CHECKPOINT))

    broadcast = launch_inproc(run_config(checkpoint_broadcast=True, checkpoint_dir=str(tmp_path / "b"), **common))
    local = launch_inproc(run_config(checkpoint_dir=str(tmp_path / "c"), **common))

    assert broadcast[0].step_losses == local[0].step_losses


def test_zero_steps_saves_initial_parameters(run_config, classify_shards):
    """Test that max_steps=0 only writes the initial state."""
    config = run_config(data=classify_shards(n=20), max_steps=0)

    report = train_run(config)

    assert report.steps == 0
    assert [os.path.basename(p) for p in report.checkpoints] == [FINAL_CHECKPOINT]
    expected = init_parameters(config.model_spec(), SeededRng(config.seed))
    assert parameter_digest(_final(report).params) == parameter_digest(expected)


def test_same_seed_same_checkpoint(run_config, classify_shards, tmp_path):
    """Test end-to-end determinism across two runs."""
    data = classify_shards(n=60)

    a = train_run(run_config(data=data, max_steps=12, checkpoint_dir=str(tmp_path / "a")))
    b = train_run(run_config(data=data, max_steps=12, checkpoint_dir=str(tmp_path / "b")))

    assert _bytes(a.checkpoints[-1]) == _bytes(b.checkpoints[-1])


def test_periodic_checkpoints_and_report(run_config, classify_shards, tmp_path):
    """Test checkpoint names and the written run report."""
    report_path = str(tmp_path / "run.txt")
    report = train_run(
        run_config(data=classify_shards(n=60), max_steps=9, checkpoint_interval=4, report=report_path)
    )

    assert [os.path.basename(p) for p in report.checkpoints] == [
        checkpoint_name(4),
        checkpoint_name(8),
        FINAL_CHECKPOINT,
    ]
    written = read_run_report(report_path)
    assert written.steps == 9
    assert written.step_losses == report.step_losses
    assert written.config.max_steps == 9


def test_tcp_backend_matches_inproc(run_config, classify_shards, tmp_path, free_port):
    """Test that both backends produce the same losses and final checkpoint."""
    data = classify_shards(n=120)
    world = 3
    inproc = launch_inproc(run_config(data=data, world_size=world, max_steps=12, checkpoint_dir=str(tmp_path / "i")))

    configs = [
        run_config(
            data=data,
            world_size=world,
            rank=rank,
            backend="tcp",
            master_port=free_port,
            max_steps=12,
            checkpoint_dir=str(tmp_path / "t"),
        )
        for rank in range(world)
    ]
    with ThreadPoolExecutor(max_workers=world) as pool:
        tcp = [f.result(timeout=120) for f in [pool.submit(train_run, c) for c in configs]]

    assert tcp[0].step_losses == inproc[0].step_losses
    assert _bytes(str(tmp_path / "t" / FINAL_CHECKPOINT)) == _bytes(str(tmp_path / "i" / FINAL_CHECKPOINT))


def test_tcp_processes_match_inproc(run_config, classify_shards, tmp_path, free_port):
    """Test four OS processes over TCP against four in-process ranks for 50 steps."""
    data = classify_shards(n=120)
    world, steps = 4, 50
    inproc = launch_inproc(run_config(data=data, world_size=world, max_steps=steps, checkpoint_dir=str(tmp_path / "i")))

    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    env = dict(os.environ, PYTHONPATH=root, HETPAR_LOG="error")
    report_path = str(tmp_path / "tcp.txt")
    common = [
        "--seed", "3", "--d-in", "6", "--hidden", "8", "--n-classes", "3", "--max-sentences", "8", "--lr", "0.1",
        "--steps", str(steps), "--world", str(world), "--backend", "tcp", "--master", f"127.0.0.1:{free_port}",
        "--comm-timeout", "60", "--data", ",".join(data), "--checkpoint-dir", str(tmp_path / "t"),
    ]
    procs = [
        subprocess.Popen(
            [sys.executable, "-m", "hetpar", "train", "--rank", str(rank), *common]
            + (["--report", report_path] if rank == 0 else []),
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
        )
        for rank in range(world)
    ]
    try:
        outputs = [p.communicate(timeout=180) for p in procs]
    finally:
        for p in procs:
            if p.poll() is None:
                p.kill()

    assert [p.returncode for p in procs] == [0] * world, [err.decode() for _, err in outputs]
    assert read_run_report(report_path).step_losses == inproc[0].step_losses
    assert _bytes(str(tmp_path / "t" / FINAL_CHECKPOINT)) == _bytes(str(tmp_path / "i" / FINAL_CHECKPOINT))


def test_ranks_must_share_the_config(run_config, classify_shards):
    """Test that a rank with a different config is stopped."""
    data = classify_shards(n=40)
    rendezvous = InprocRendezvous(2, 10.0)
    configs = [run_config(data=data, world_size=2, rank=0), run_config(data=data, world_size=2, rank=1, seed=4)]

    with ThreadPoolExecutor(max_workers=2) as pool:
        futures = [pool.submit(train_run, c, rendezvous) for c in configs]
        outcomes = []
        for f in futures:
            try:
                outcomes.append(f.result(timeout=60))
            except Exception as e:
                outcomes.append(e)

    assert isinstance(outcomes[1], ConfigurationError)
    assert isinstance(outcomes[0], Exception)


def test_zero_global_weight(run_config, classify_shards):
    """Test that a step where every rank is a dummy is fatal."""
    worker = RankWorker(run_config(data=classify_shards(n=10)))
    worker.setup()
    records = [worker.index.read(0)]
    dummy = Batch(records=records, indices=[0], token_count=1, is_dummy=True, round_index=0, batch_index=0)

    try:
        with pytest.raises(UnsupportedConfigurationError):
            worker.train_step([dummy])
    finally:
        worker.index.close()


def test_divergence_is_detected(run_config, classify_shards):
    """Test the parameter digest comparison between ranks."""
    data = classify_shards(n=20)
    rendezvous = InprocRendezvous(2, 10.0)
    workers = [RankWorker(run_config(data=data, world_size=2, rank=r), rendezvous) for r in range(2)]

    def script(worker):
        worker.setup()
        if worker.rank == 1:
            worker.params = {k: v + 1e-12 for k, v in worker.params.items()}
        try:
            worker.check_consistency(force=True)
        finally:
            worker.index.close()

    with ThreadPoolExecutor(max_workers=2) as pool:
        futures = [pool.submit(script, w) for w in workers]
        futures[0].result(timeout=60)
        with pytest.raises(ParameterDivergenceError):
            futures[1].result(timeout=60)


def test_data_must_fit_the_model(run_config, classify_shards):
    """Test that shards without the model's fields are refused."""
    config = run_config(data=classify_shards(n=10), arch="attention_classifier", d_model=8, n_heads=2)

    with pytest.raises(ConfigurationError):
        train_run(config)


def test_resume_rejects_inconsistent_optimizer_state(run_config, classify_shards, tmp_path):
    """Test that the optimizer update count must match the checkpoint step."""
    data = classify_shards(n=40)
    report = train_run(run_config(data=data, max_steps=5, checkpoint_dir=str(tmp_path / "a")))
    state = _final(report)
    state.optimizer_state["t"] = 3
    path = save_checkpoint(state, str(tmp_path / "edited.hck"))

    with pytest.raises(CheckpointError):
        train_run(run_config(data=data, max_steps=10, resume=path, checkpoint_dir=str(tmp_path / "b")))
