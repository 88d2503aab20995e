"""Tests for the run ledger."""

import json
from pathlib import Path

from src.runs import (
    RUNS_DB_NAME,
    STATUS_FAILED,
    STATUS_FINISHED,
    STATUS_RUNNING,
    finish_run,
    open_ledger,
    runs_for,
    start_run,
)


def test_open_creates_the_ledger(tmp_path: Path) -> None:
    root = tmp_path / "runs"
    open_ledger(root)
    assert json.loads((root / RUNS_DB_NAME).read_text()) == []


def test_run_lifecycle(tmp_path: Path) -> None:
    ledger = open_ledger(tmp_path)
    record = start_run(ledger, "train", "mlp", "saq", 3, tmp_path / "train-mlp-s3")
    assert record.status == STATUS_RUNNING
    stored = json.loads((tmp_path / RUNS_DB_NAME).read_text())
    assert len(stored) == 1
    assert stored[0]["id"] == str(record.id)
    assert stored[0]["command"] == "train"

    finish_run(ledger, record, 0, bitwidths="4,4", final_loss=0.5, final_acc=0.9, total_bops=1024)
    stored = json.loads((tmp_path / RUNS_DB_NAME).read_text())
    assert stored[0]["status"] == STATUS_FINISHED
    assert stored[0]["exit_code"] == 0
    assert stored[0]["bitwidths"] == "4,4"
    assert stored[0]["total_bops"] == 1024
    assert stored[0]["finished_at"] is not None


def test_failed_run_and_lookup(tmp_path: Path) -> None:
    ledger = open_ledger(tmp_path)
    failed = start_run(ledger, "search", "miniconv", "saq", 0, tmp_path / "a")
    start_run(ledger, "train", "miniconv", "sgd", 0, tmp_path / "b")
    finish_run(ledger, failed, 3)
    assert failed.status == STATUS_FAILED
    assert failed.final_loss is None
    found = runs_for(open_ledger(tmp_path), "search")
    assert [r.id for r in found] == [failed.id]
    assert found[0].exit_code == 3
