"""Speedup/expansion arithmetic, run-report files and the scaling table."""

import logging
import os
from typing import List, Sequence, Tuple

from hetpar.schemas.run import RunConfig, RunReport, ScalingRow, format_value, parse_key_values

logger = logging.getLogger(__name__)

CONFIG_PREFIX = "config."
REPORT_KEYS = ("world_size", "steps", "epochs_completed", "total_time", "avg_step_time", "final_loss")

TABLE_COLUMNS = (
    ("nodes", "Nodes", "{:d}"),
    ("ranks", "Ranks", "{:d}"),
    ("epochs", "Epochs", "{:d}"),
    ("steps", "Steps", "{:d}"),
    ("avg_step", "AVG step (s)", "{:.4f}"),
    ("training_time", "Training time (s)", "{:.2f}"),
    ("loss", "Loss", "{:.4f}"),
    ("expansion", "Expansion", "{:.2f}"),
    ("speedup", "Speedup", "{:.2f}"),
)


def scaling_from_times(baseline_time: float, candidate_time: float, node_ratio: float) -> Tuple[float, float]:
    """
    Speedup and expansion from two wall-clock totals.

    Args:
        baseline_time: Training time of the reference configuration
        candidate_time: Training time of the scaled configuration
        node_ratio: Resource ratio between the two

    Returns:
        (speedup, expansion) with speedup = baseline / candidate and expansion = speedup / ratio

    Raises:
        ValueError: On a non-positive candidate time or ratio
    """
    if candidate_time <= 0:
        raise ValueError(f"Candidate training time must be positive, got {candidate_time}")
    if node_ratio <= 0:
        raise ValueError(f"Node ratio must be positive, got {node_ratio}")
    speedup = baseline_time / candidate_time
    return speedup, speedup / node_ratio


def compute_scaling_metrics(baseline: RunReport, candidate: RunReport, node_ratio: float) -> Tuple[float, float]:
    """
    Speedup and expansion of ``candidate`` over ``baseline``.

    Both runs should cover the same work (world size × steps); a mismatch is
    logged since the ratio is then not a scaling measure.
    """
    baseline_work = baseline.world_size * baseline.steps
    candidate_work = candidate.world_size * candidate.steps
    if baseline_work != candidate_work:
        logger.warning(f"Runs cover different work: {baseline_work} vs {candidate_work} rank-steps")
    return scaling_from_times(baseline.total_time, candidate.total_time, node_ratio)


def report_lines(report: RunReport) -> List[str]:
    """Key=value lines of a run report; floats are written with ``repr``."""
    lines = [f"{key}={format_value(getattr(report, key))}" for key in REPORT_KEYS]
    lines.append(f"step_losses={','.join(repr(float(loss)) for loss in report.step_losses)}")
    lines.append(f"checkpoints={','.join(report.checkpoints)}")
    lines.extend(f"{CONFIG_PREFIX}{line}" for line in report.config.to_lines())
    return lines


def write_run_report(report: RunReport, path: str) -> str:
    """Write ``report`` as a key=value text file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(report_lines(report)) + "\n")
    logger.info(f"Wrote run report {path}")
    return path


def parse_run_report(lines: Sequence[str]) -> RunReport:
    """Inverse of ``report_lines``."""
    values = parse_key_values(lines)
    config_lines = [f"{key[len(CONFIG_PREFIX):]}={value}" for key, value in values.items() if key.startswith(CONFIG_PREFIX)]
    losses = values.get("step_losses", "")
    checkpoints = values.get("checkpoints", "")
    return RunReport(
        config=RunConfig.from_lines(config_lines),
        world_size=int(values["world_size"]),
        steps=int(values["steps"]),
        epochs_completed=int(values["epochs_completed"]),
        total_time=float(values["total_time"]),
        avg_step_time=float(values["avg_step_time"]),
        final_loss=float(values["final_loss"]),
        step_losses=[float(v) for v in losses.split(",") if v],
        checkpoints=[c for c in checkpoints.split(",") if c],
    )


def read_run_report(path: str) -> RunReport:
    """Read a report written by ``write_run_report``."""
    with open(path, encoding="utf-8") as f:
        return parse_run_report(f.read().splitlines())


def scaling_row(report: RunReport, baseline: RunReport, nodes: int = 1) -> ScalingRow:
    """Table row for ``report``, scaled against ``baseline`` by rank ratio."""
    speedup, expansion = compute_scaling_metrics(baseline, report, report.world_size / baseline.world_size)
    return ScalingRow(
        nodes=nodes,
        ranks=report.world_size,
        epochs=report.epochs_completed,
        steps=report.steps,
        avg_step=report.avg_step_time,
        training_time=report.total_time,
        loss=report.final_loss,
        expansion=expansion,
        speedup=speedup,
    )


def format_scaling_table(rows: Sequence[ScalingRow]) -> str:
    """Render rows as an aligned plain-text table."""
    header = [title for _, title, _ in TABLE_COLUMNS]
    body = [[fmt.format(getattr(row, key)) for key, _, fmt in TABLE_COLUMNS] for row in rows]
    widths = [max(len(cell) for cell in column) for column in zip(header, *body)]
    lines = ["  ".join(cell.rjust(width) for cell, width in zip(header, widths))]
    lines.append("  ".join("-" * width for width in widths))
    lines.extend("  ".join(cell.rjust(width) for cell, width in zip(cells, widths)) for cells in body)
    return "\n".join(lines)
