"""Per-rank training driver."""

import hashlib
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from hetpar.config import debug_enabled
from hetpar.errors import (
    CheckpointError,
    CommError,
    ConfigurationError,
    ParameterDivergenceError,
    UnsupportedConfigurationError,
)
from hetpar.models import build_model
from hetpar.schemas.data import BatchPlan
from hetpar.schemas.run import RunConfig, RunReport, StepReport
from hetpar.services.accumulator import Accumulator
from hetpar.services.autograd import backward, zero_gradients
from hetpar.services.batching import build_epoch_batches, partition_for_rank, updates_in_epoch
from hetpar.services.checkpoint import (
    TrainState,
    decode_checkpoint,
    load_checkpoint,
    read_checkpoint_bytes,
    save_checkpoint,
    state_from_config,
)
from hetpar.services.dataset_index import DatasetIndex, build_index
from hetpar.services.loader import END_OF_EPOCH, Batch, BatchLoader, BlockCache
from hetpar.services.metrics import write_run_report
from hetpar.services.optim import Optimizer, build_optimizer
from hetpar.services.parameters import Parameters, export_state_dict, import_state_dict, init_parameters, parameter_digest
from hetpar.services.process_group import InprocRendezvous, ProcessGroup, init_process_group
from hetpar.services.rng import SeededRng, derived_rng
from hetpar.services.schedulers import build_scheduler

logger = logging.getLogger(__name__)

FINAL_CHECKPOINT = "checkpoint_last.hck"
RANK_LOCAL_KEYS = ("rank", "report")


def checkpoint_name(step: int) -> str:
    """File name of the periodic checkpoint after update ``step``."""
    return f"checkpoint_{step:06d}.hck"


def flatten_gradients(grads: Mapping[str, np.ndarray]) -> np.ndarray:
    """Concatenate gradients in name order as one float64 vector."""
    if not grads:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([np.asarray(grads[name], dtype=np.float64).reshape(-1) for name in sorted(grads)])


def unflatten_gradients(vector: np.ndarray, params: Mapping[str, np.ndarray]) -> Parameters:
    """Split a flat vector back into parameter-shaped arrays of the parameter dtype."""
    grads: Parameters = {}
    offset = 0
    for name in sorted(params):
        size = params[name].size
        grads[name] = vector[offset:offset + size].reshape(params[name].shape).astype(params[name].dtype)
        offset += size
    return grads


def config_digest(config: RunConfig) -> str:
    """sha256 of the settings every rank must share."""
    lines = [line for line in config.to_lines() if line.split("=", 1)[0] not in RANK_LOCAL_KEYS]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


class RankWorker:
    """Runs one rank's share of a data-parallel training run.

    Every rank executes the same sequence of collectives: per optimizer
    update one all_reduce of (loss sum, weight), one all_reduce of the
    gradient sums and one gather of step durations, plus the periodic
    consistency and checkpoint fences.
    """

    def __init__(
        self,
        config: RunConfig,
        rendezvous: Optional[InprocRendezvous] = None,
        group: Optional[ProcessGroup] = None,
    ):
        """Initialize the worker; nothing is loaded until ``setup``."""
        self.config = config
        self.rank = config.rank
        self.rendezvous = rendezvous
        self.group = group
        self._owns_group = group is None
        self.model = build_model(config.model_spec())
        self.schedule = build_scheduler(config)
        self.index: Optional[DatasetIndex] = None
        self.params: Parameters = {}
        self.optimizer: Optional[Optimizer] = None
        self.seed = config.seed
        self.epoch = 0
        self.step = 0
        self.resume_rounds = 0
        self.checkpoints: List[str] = []
        self.step_reports: List[StepReport] = []
        self.cache = (
            BlockCache(config.cache_bytes, config.cache_block_bytes, config.cache_policy)
            if config.cache_bytes > 0
            else None
        )

    @property
    def is_master(self) -> bool:
        """Whether this worker is rank 0."""
        return self.rank == 0

    def _log(self, level: int, message: str) -> None:
        logger.log(level, f"[rank {self.rank}] {message}")

    # Setup

    def setup(self) -> None:
        """
        Join the group, index the data, and agree on the initial state.

        Parameters (fresh or resumed) always come from the master's broadcast.

        Raises:
            ConfigurationError: If ranks disagree on the config or the data does not fit the model
        """
        if self.group is None:
            self.group = init_process_group(self.config, self.rendezvous)

        ours = config_digest(self.config)
        theirs = self.group.broadcast(ours.encode() if self.is_master else b"").decode()
        if theirs != ours:
            raise ConfigurationError(f"Rank {self.rank} config differs from the master's")

        if not self.config.data:
            raise ConfigurationError("No data shards configured")
        self.index = build_index(self.config.data)
        if self.index.total == 0:
            raise ConfigurationError(f"Shards {self.config.data} hold no instances")
        fields = next({f.name for f in shard.fields} for shard in self.index.shards if len(shard))
        missing = set(self.model.RECORD_FIELDS) - fields
        if missing:
            raise ConfigurationError(f"Data lacks fields {sorted(missing)} needed by {self.config.arch}")

        resumed = self._load_resume_state() if self.config.resume else None
        if resumed is not None:
            params = resumed.params
        elif self.is_master:
            params = init_parameters(self.config.model_spec(), SeededRng(self.seed))
        else:
            params = {}
        payload = export_state_dict(params) if self.is_master else b""
        self.params = import_state_dict(self.group.broadcast(payload))
        self.model.check_parameters(self.params)

        self.optimizer = build_optimizer(self.config, self.params)
        if resumed is not None:
            self._restore_position(resumed)
            self.optimizer.load_state_dict(resumed.optimizer_state)
            if self.optimizer.updates != resumed.step:
                raise CheckpointError(
                    f"Checkpoint {self.config.resume} holds {self.optimizer.updates} optimizer updates for step {resumed.step}"
                )
        self._log(logging.INFO, f"Ready at epoch {self.epoch}, step {self.step}")

    def _load_resume_state(self) -> TrainState:
        path = self.config.resume
        if self.config.checkpoint_broadcast:
            data = read_checkpoint_bytes(path) if self.is_master else b""
            state = decode_checkpoint(self.group.broadcast(data), path)
        else:
            state = load_checkpoint(path)

        if state.model_spec != self.config.model_spec():
            raise ConfigurationError(f"Checkpoint {path} was written for a different model spec")
        if state.weight_policy != self.config.weight_policy:
            raise ConfigurationError(
                f"Checkpoint {path} uses weight policy {state.weight_policy}, config says {self.config.weight_policy}"
            )
        if state.optimizer_state.get("kind") != self.config.optimizer:
            raise ConfigurationError(
                f"Checkpoint {path} holds {state.optimizer_state.get('kind')} state, config says {self.config.optimizer}"
            )
        if state.seed != self.config.seed:
            self._log(logging.WARNING, f"Using checkpoint seed {state.seed} instead of configured seed {self.config.seed}")
        return state

    def epoch_plan(self, epoch: int) -> BatchPlan:
        """Batches of ``epoch`` for the run's seed."""
        return build_epoch_batches(
            self.index.token_lengths,
            self.config.max_sentences,
            self.config.max_tokens,
            self.seed,
            epoch,
        )

    def _restore_position(self, state: TrainState) -> None:
        """Derive the within-epoch position from the completed epochs' update counts."""
        self.seed = state.seed
        self.epoch = state.epoch
        self.step = state.step

        before = sum(
            updates_in_epoch(self.epoch_plan(e).num_batches, state.world_size, state.update_freq)
            for e in range(state.epoch)
        )
        within = state.step - before
        in_epoch = updates_in_epoch(self.epoch_plan(state.epoch).num_batches, state.world_size, state.update_freq)
        if not 0 <= within <= in_epoch:
            raise CheckpointError(
                f"Checkpoint step {state.step} is inconsistent with epoch {state.epoch} ({before} updates before it)"
            )
        if within == in_epoch:
            # saved after the epoch's last update
            self.epoch += 1
            within = 0
        changed = (state.world_size, state.update_freq) != (self.config.world_size, self.config.update_freq)
        if changed and within:
            raise UnsupportedConfigurationError(
                f"Checkpoint was written mid-epoch by world {state.world_size} x update_freq {state.update_freq}; "
                f"resuming with world {self.config.world_size} x update_freq {self.config.update_freq} "
                "is only possible at an epoch boundary"
            )
        self.resume_rounds = within * self.config.update_freq

    # Training

    def _micro_step(self, batch: Batch) -> Tuple[float, float, Parameters]:
        if batch.is_dummy:
            # forward keeps every rank's compute symmetric; the result is discarded
            self.model.model_forward(self.params, batch.records, self.config.weight_policy, trace=False)
            return 0.0, 0.0, zero_gradients(self.params)

        rng = derived_rng(self.seed, self.epoch + batch.batch_index) if self.config.dropout > 0 else None
        result = self.model.model_forward(self.params, batch.records, self.config.weight_policy, rng)
        grads = backward(result.tape, self.params, result.loss)
        return result.loss_sum, result.weight, grads

    def train_step(self, batches: List[Batch], started: Optional[float] = None) -> StepReport:
        """
        One synchronized optimizer update over this rank's micro-batches.

        Each rank sums its micro-step losses, weights and gradients; the sums
        are all-reduced in rank order and every rank applies the same update
        with the gradient divided by the global weight.

        Args:
            batches: This rank's micro-batches (dummies included)
            started: Monotonic start time of the step, defaults to now

        Returns:
            StepReport; ``rank_durations`` is only filled on the master

        Raises:
            UnsupportedConfigurationError: If the global weight is zero
        """
        started = time.monotonic() if started is None else started
        accumulator = Accumulator(self.config.update_freq)
        for batch in batches:
            accumulator.accumulate(*self._micro_step(batch))
        if not accumulator.ready:
            self._log(
                logging.DEBUG,
                f"Step {self.step + 1}: epoch tail with {len(batches)} of {self.config.update_freq} micro-steps",
            )
        local = accumulator.flush()

        loss_sum, weight = self.group.all_reduce_sum(np.array([local.loss_sum, local.weight], dtype=np.float64))
        if weight <= 0:
            raise UnsupportedConfigurationError(f"Step {self.step + 1}: every rank reported zero weight")
        total = self.group.all_reduce_sum(flatten_gradients(local.grads))
        grads = unflatten_gradients(total / weight, self.params)

        lr = self.schedule(self.step + 1)
        self.params = self.optimizer.step(self.params, grads, lr)
        self.step += 1

        duration = time.monotonic() - started
        durations = self.group.gather_scalars(duration)
        self.check_consistency()

        loss = float(loss_sum / weight)
        report = StepReport(
            step=self.step,
            epoch=self.epoch,
            loss=loss,
            weight=float(weight),
            duration=duration,
            rank_durations=durations,
        )
        if self.is_master:
            self._log(
                logging.INFO,
                f"Step {self.step} epoch {self.epoch}: loss {loss:.6f} weight {weight:g} lr {lr:.3e} time {duration:.3f}s",
            )
        return report

    def check_consistency(self, force: bool = False) -> None:
        """
        Compare parameter digests with the master's.

        Runs every ``consistency_interval`` updates, or every update at debug level.

        Raises:
            ParameterDivergenceError: On a mismatch
        """
        interval = self.config.consistency_interval
        if not force and (interval == 0 or (self.step % interval != 0 and not debug_enabled())):
            return
        ours = parameter_digest(self.params)
        master = self.group.broadcast(ours.encode() if self.is_master else b"").decode()
        if master != ours:
            raise ParameterDivergenceError(
                f"Rank {self.rank} parameters diverged from the master's at step {self.step}: {ours[:16]} != {master[:16]}"
            )

    def train_epoch(self) -> bool:
        """
        Train through the current epoch in lockstep rounds.

        Returns:
            True if the epoch was completed, False if max_steps stopped it
        """
        plan = self.epoch_plan(self.epoch)
        rank_plan = partition_for_rank(plan, self.config.world_size, self.rank, self.config.borrow_dummy)
        skip = min(self.resume_rounds, len(rank_plan.rounds))
        self.resume_rounds = 0
        loader = BatchLoader(
            self.index,
            plan,
            rank_plan,
            prefetch_depth=self.config.prefetch_depth,
            cache=self.cache,
            skip_rounds=skip,
        )
        self._log(
            logging.DEBUG,
            f"Epoch {self.epoch}: {plan.num_batches} batches, {len(rank_plan.rounds)} rounds, skipping {skip}",
        )

        finished = False
        try:
            while True:
                started = time.monotonic()
                batches = []
                while len(batches) < self.config.update_freq:
                    batch = loader.next_batch()
                    if batch is END_OF_EPOCH:
                        break
                    batches.append(batch)
                if not batches:
                    finished = True
                    break
                if self.step >= self.config.max_steps:
                    break

                self.step_reports.append(self.train_step(batches, started))
                if self.config.checkpoint_interval and self.step % self.config.checkpoint_interval == 0:
                    self.save(checkpoint_name(self.step))
        finally:
            loader.close()

        if finished:
            self.epoch += 1
        return finished

    def save(self, name: str) -> Optional[str]:
        """Fence all ranks, then let the master write ``name`` under the checkpoint directory."""
        self.group.barrier()
        if not self.is_master:
            return None
        state = state_from_config(
            self.config,
            self.params,
            self.optimizer.state_dict(),
            epoch=self.epoch,
            step=self.step,
        )
        state.seed = self.seed
        path = save_checkpoint(state, os.path.join(self.config.checkpoint_dir, name), self.rank)
        self.checkpoints.append(path)
        return path

    def train_run(self) -> RunReport:
        """
        Set up, train until max_steps or max_epochs, and save the final checkpoint.

        Any failure aborts the group so peers stop instead of waiting.

        Returns:
            RunReport for this rank
        """
        try:
            self.setup()
            started = time.monotonic()
            while self.step < self.config.max_steps:
                if self.config.max_epochs and self.epoch >= self.config.max_epochs:
                    break
                if not self.train_epoch():
                    break
            self.save(FINAL_CHECKPOINT)
            self.group.barrier()
            total_time = time.monotonic() - started
        except Exception as e:
            self._log(logging.ERROR, f"Run failed: {e}")
            if self.group is not None:
                self.group.abort(str(e))
            raise
        finally:
            if self.index is not None:
                self.index.close()
            if self.group is not None and self._owns_group:
                self.group.close()

        losses = [r.loss for r in self.step_reports]
        durations = [r.duration for r in self.step_reports]
        report = RunReport(
            config=self.config,
            world_size=self.config.world_size,
            steps=len(self.step_reports),
            epochs_completed=self.epoch,
            total_time=total_time,
            avg_step_time=float(np.mean(durations)) if durations else 0.0,
            final_loss=losses[-1] if losses else float("nan"),
            step_losses=losses,
            checkpoints=self.checkpoints,
        )
        if self.config.report and self.is_master:
            write_run_report(report, self.config.report)
        return report


def train_run(config: RunConfig, rendezvous: Optional[InprocRendezvous] = None) -> RunReport:
    """Run one rank to completion."""
    return RankWorker(config, rendezvous).train_run()


def launch_inproc(config: RunConfig) -> List[RunReport]:
    """
    Run every rank of ``config.world_size`` as a thread of this process.

    Returns:
        RunReports in rank order

    Raises:
        Exception: The first rank failure; failures caused by another rank's abort rank last
    """
    world = config.world_size
    rendezvous = InprocRendezvous(world, config.comm_timeout)
    configs = [config.model_copy(update={"rank": r, "backend": "inproc"}) for r in range(world)]

    with ThreadPoolExecutor(max_workers=world, thread_name_prefix="hetpar-rank") as pool:
        futures = [pool.submit(train_run, c, rendezvous) for c in configs]
        outcomes: Dict[int, object] = {}
        for rank, future in enumerate(futures):
            try:
                outcomes[rank] = future.result()
            except Exception as e:
                outcomes[rank] = e

    errors = [o for o in outcomes.values() if isinstance(o, Exception)]
    if errors:
        errors.sort(key=lambda e: isinstance(e, CommError))
        raise errors[0]
    return [outcomes[r] for r in range(world)]
