"""Command-line entry point: datagen, train, bench and inspect."""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from hetpar.config import Settings, configure_logging
from hetpar.errors import ConfigurationError, UnsupportedConfigurationError
from hetpar.schemas.run import RunConfig, RunReport
from hetpar.services.checkpoint import CHECKPOINT_MAGIC, describe_checkpoint
from hetpar.services.datagen import generate_dataset
from hetpar.services.metrics import format_scaling_table, scaling_row
from hetpar.services.shards import SHARD_MAGIC, describe_shard
from hetpar.worker import launch_inproc, train_run

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class _ArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so ``main`` owns exit codes."""

    def error(self, message: str):
        raise ConfigurationError(message)


def _master_address(value: str) -> Dict[str, Any]:
    host, sep, port = value.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {value!r}")
    return {"master_addr": host, "master_port": int(port)}


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    """Flags that map onto RunConfig keys; unset flags leave the file or default value."""
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--task", choices=["synthetic-classify", "synthetic-sequence", "mlm-nsp"])
    parser.add_argument("--data", help="comma-separated shard paths")
    parser.add_argument("--n-instances", dest="n_instances", type=int)
    parser.add_argument("--n-shards", dest="n_shards", type=int)

    group = parser.add_argument_group("process group")
    group.add_argument("--world", dest="world_size", type=int)
    group.add_argument("--rank", type=int)
    group.add_argument("--backend", choices=["inproc", "tcp"])
    group.add_argument("--master", type=_master_address, help="HOST:PORT of rank 0")
    group.add_argument("--comm-timeout", dest="comm_timeout", type=float)

    group = parser.add_argument_group("batching")
    group.add_argument("--max-sentences", dest="max_sentences", type=int)
    group.add_argument("--max-tokens", dest="max_tokens", type=int)
    group.add_argument("--weight-policy", dest="weight_policy", choices=["sentences", "tokens"])
    group.add_argument("--prefetch-depth", dest="prefetch_depth", type=int)
    group.add_argument("--cache-bytes", dest="cache_bytes", type=int)
    group.add_argument("--cache-policy", dest="cache_policy", choices=["lru", "lfu"])
    group.add_argument("--no-borrow-dummy", dest="borrow_dummy", action="store_const", const=False)

    group = parser.add_argument_group("model")
    group.add_argument("--arch", choices=["mlp", "attention_classifier", "masked_token_model"])
    group.add_argument("--d-in", dest="d_in", type=int)
    group.add_argument("--hidden", help="comma-separated hidden widths")
    group.add_argument("--n-classes", dest="n_classes", type=int)
    group.add_argument("--d-model", dest="d_model", type=int)
    group.add_argument("--n-heads", dest="n_heads", type=int)
    group.add_argument("--d-ff", dest="d_ff", type=int)
    group.add_argument("--vocab-size", dest="vocab_size", type=int)
    group.add_argument("--max-seq-len", dest="max_seq_len", type=int)
    group.add_argument("--dropout", type=float)
    group.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    group.add_argument("--dtype", choices=["f32", "f64"])

    group = parser.add_argument_group("optimization")
    group.add_argument("--optimizer", choices=["sgd", "adam"])
    group.add_argument("--lr", dest="peak_lr", type=float)
    group.add_argument("--scheduler", choices=["constant", "inverse_sqrt", "linear"])
    group.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    group.add_argument("--update-freq", dest="update_freq", type=int)
    group.add_argument("--steps", dest="max_steps", type=int)
    group.add_argument("--epochs", dest="max_epochs", type=int)

    group = parser.add_argument_group("checkpoints")
    group.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    group.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    group.add_argument("--checkpoint-broadcast", dest="checkpoint_broadcast", action="store_const", const=True)
    group.add_argument("--resume")
    group.add_argument("--report")


def build_parser() -> argparse.ArgumentParser:
    """Parser for every subcommand."""
    parser = _ArgumentParser(prog="hetpar", description="CPU data-parallel training engine")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    datagen = sub.add_parser("datagen", help="generate a synthetic dataset")
    _add_run_options(datagen)
    datagen.add_argument("--out", help="output directory (default <checkpoint-dir>/data)")
    datagen.set_defaults(handler=cmd_datagen)

    train = sub.add_parser("train", help="train one rank, or every rank in-process")
    _add_run_options(train)
    train.set_defaults(handler=cmd_train)

    bench = sub.add_parser("bench", help="train at several world sizes and tabulate the scaling")
    _add_run_options(bench)
    bench.add_argument("--worlds", default="1,2,4", help="comma-separated world sizes")
    bench.add_argument("--total-steps", dest="bench_total_steps", type=int, default=64)
    bench.set_defaults(handler=cmd_bench)

    inspect = sub.add_parser("inspect", help="describe a shard or checkpoint file")
    inspect.add_argument("path")
    inspect.add_argument("--full", action="store_true", help="decode payloads")
    inspect.set_defaults(handler=cmd_inspect)

    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """
    Build the run config: defaults, then the config file, then flags.

    Raises:
        ConfigurationError: If the file is unreadable or the result is invalid
    """
    lines: List[str] = []
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                lines = f.read().splitlines()
        except OSError as e:
            raise ConfigurationError(f"Cannot read config file {args.config}: {e}")

    overrides = {key: getattr(args, key, None) for key in RunConfig.model_fields}
    if getattr(args, "master", None):
        overrides.update(args.master)
    try:
        return RunConfig.from_lines(lines, **overrides)
    except ValueError as e:
        raise ConfigurationError(f"Invalid configuration: {e}")


def _ensure_data(config: RunConfig) -> RunConfig:
    if config.data:
        return config
    out_dir = os.path.join(config.checkpoint_dir, "data")
    paths = generate_dataset(config, out_dir)
    return config.model_copy(update={"data": paths})


def _print_report(report: RunReport) -> None:
    print(f"world_size={report.world_size}")
    print(f"steps={report.steps}")
    print(f"epochs_completed={report.epochs_completed}")
    print(f"final_loss={report.final_loss!r}")
    print(f"total_time={report.total_time:.4f}")
    print(f"avg_step_time={report.avg_step_time:.6f}")


def cmd_datagen(args: argparse.Namespace) -> int:
    """Write the configured synthetic task as shards."""
    config = resolve_config(args)
    out_dir = args.out or os.path.join(config.checkpoint_dir, "data")
    for path in generate_dataset(config, out_dir):
        print(path)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    """Train; inproc runs every rank here, tcp runs only ``--rank``."""
    config = resolve_config(args)
    if config.backend == "tcp":
        if not config.data:
            raise ConfigurationError("tcp ranks need --data so every rank reads the same shards")
        report = train_run(config)
    else:
        report = launch_inproc(_ensure_data(config))[0]
    if config.rank == 0:
        _print_report(report)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    """Same total work at each world size; the first world is the baseline."""
    config = resolve_config(args)
    if config.backend != "inproc":
        raise UnsupportedConfigurationError("bench runs its ranks in-process; use --backend inproc")
    try:
        worlds = [int(w) for w in args.worlds.split(",") if w.strip()]
    except ValueError:
        raise ConfigurationError(f"--worlds must be comma-separated integers, got {args.worlds!r}")
    if not worlds or min(worlds) < 1:
        raise ConfigurationError(f"--worlds must list positive world sizes, got {args.worlds!r}")

    total = args.bench_total_steps
    for world in worlds:
        if total % world:
            raise ConfigurationError(f"--total-steps {total} is not divisible by world size {world}")

    config = _ensure_data(config)
    reports = []
    for world in worlds:
        run = config.model_copy(
            update={
                "world_size": world,
                "rank": 0,
                "max_steps": total // world,
                "max_epochs": 0,
                "checkpoint_dir": os.path.join(config.checkpoint_dir, f"bench_w{world}"),
                "checkpoint_interval": 0,
                "resume": "",
                "report": "",
            }
        )
        logger.info(f"Benchmarking world size {world} for {run.max_steps} steps")
        reports.append(launch_inproc(run)[0])

    print(format_scaling_table([scaling_row(report, reports[0]) for report in reports]))
    return EXIT_OK


def _print_summary(summary: Dict[str, Any]) -> None:
    for key, value in summary.items():
        if isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True)
        print(f"{key}: {value}")


def cmd_inspect(args: argparse.Namespace) -> int:
    """Describe a shard or checkpoint, chosen by its magic bytes."""
    try:
        with open(args.path, "rb") as f:
            magic = f.read(4)
    except OSError as e:
        raise ConfigurationError(f"Cannot open {args.path}: {e}")

    if magic == SHARD_MAGIC:
        _print_summary(describe_shard(args.path, full=args.full))
    elif magic == CHECKPOINT_MAGIC:
        _print_summary(describe_checkpoint(args.path, full=args.full))
    else:
        logger.error(f"{args.path}: unrecognized format (magic {magic!r})")
        return EXIT_USAGE
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run the CLI.

    Returns:
        0 on success, 2 on usage or configuration errors, 1 on any other failure
    """
    try:
        configure_logging(Settings().HETPAR_LOG)
    except ValueError as e:
        print(f"hetpar: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except (ConfigurationError, UnsupportedConfigurationError, ValidationError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE
