"""Tests for scaling metrics and run reports."""

import math

import pytest

from hetpar.schemas.run import RunConfig, RunReport
from hetpar.services.metrics import (
    compute_scaling_metrics,
    format_scaling_table,
    read_run_report,
    scaling_from_times,
    scaling_row,
    write_run_report,
)


def _report(world_size=1, steps=8, total_time=10.0, losses=(1.25, 0.5)):
    return RunReport(
        config=RunConfig(world_size=world_size, max_steps=steps, seed=5),
        world_size=world_size,
        steps=steps,
        epochs_completed=1,
        total_time=total_time,
        avg_step_time=total_time / steps,
        final_loss=losses[-1],
        step_losses=list(losses),
        checkpoints=["/tmp/ckpt/checkpoint_last.hck"],
    )


def test_two_node_speedup():
    """Test speedup and expansion for a doubling of resources."""
    speedup, expansion = scaling_from_times(49.5, 34.8, 2)

    assert speedup == pytest.approx(1.42, abs=0.01)
    assert expansion == pytest.approx(0.71, abs=0.01)


def test_eight_node_speedup():
    """Test speedup and expansion for eight times the resources."""
    speedup, expansion = scaling_from_times(49.5, 10.3, 8)

    assert speedup == pytest.approx(4.81, abs=0.02)
    assert expansion == pytest.approx(0.60, abs=0.01)


@pytest.mark.parametrize("candidate,ratio", [(0.0, 2), (-1.0, 2), (5.0, 0), (5.0, -2)])
def test_rejects_non_positive_inputs(candidate, ratio):
    """Test that zero or negative times and ratios are refused."""
    with pytest.raises(ValueError):
        scaling_from_times(10.0, candidate, ratio)


def test_metrics_from_reports():
    """Test speedup between two reports covering the same work."""
    speedup, expansion = compute_scaling_metrics(_report(1, 8, 12.0), _report(4, 2, 4.0), 4)

    assert speedup == pytest.approx(3.0)
    assert expansion == pytest.approx(0.75)


def test_report_roundtrip(tmp_path):
    """Test that a written report reads back with its config."""
    report = _report(losses=(2.302585092994046, 1.1, 0.1 + 0.2))
    path = write_run_report(report, str(tmp_path / "reports" / "run.txt"))

    restored = read_run_report(path)

    assert restored.step_losses == report.step_losses
    assert restored.checkpoints == report.checkpoints
    assert restored.config == report.config
    assert restored.total_time == report.total_time


def test_report_without_steps(tmp_path):
    """Test a report of a run that never updated."""
    report = _report(steps=0, total_time=0.5, losses=(float("nan"),))
    report.step_losses = []

    restored = read_run_report(write_run_report(report, str(tmp_path / "run.txt")))

    assert restored.step_losses == []
    assert math.isnan(restored.final_loss)


def test_scaling_table():
    """Test the rows and alignment of the scaling table."""
    baseline = _report(1, 8, 12.0)
    rows = [scaling_row(baseline, baseline), scaling_row(_report(2, 4, 8.0), baseline)]

    table = format_scaling_table(rows).splitlines()

    assert len(table) == 4
    assert table[0].split()[:2] == ["Nodes", "Ranks"]
    assert set(table[1]) <= {"-", " "}
    assert len({len(line) for line in table}) == 1
    assert table[2].split()[-2:] == ["1.00", "1.00"]
    assert table[3].split()[-2:] == ["0.75", "1.50"]
