"""Run ledger: one record per command invocation, kept in ``runs.json``."""

from __future__ import annotations

import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from typed_json_db import IndexedJsonDB

RUNS_DB_NAME = "runs.json"
STATUS_RUNNING = "running"
STATUS_FINISHED = "finished"
STATUS_FAILED = "failed"


@dataclass
class RunRecord:
    """RunRecord dataclass for persistence."""

    id: uuid.UUID
    command: str
    model: str
    optimizer: str
    seed: int
    run_dir: str
    created_at: str  # ISO format datetime string
    status: str = STATUS_RUNNING
    bitwidths: Optional[str] = None
    final_loss: Optional[float] = None
    final_acc: Optional[float] = None
    total_bops: Optional[int] = None
    exit_code: Optional[int] = None
    finished_at: Optional[str] = None


def open_ledger(output_root: Path) -> IndexedJsonDB[RunRecord, uuid.UUID]:
    """Open (creating if needed) the ledger under ``output_root``."""
    path = output_root / RUNS_DB_NAME
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("[]")
    return IndexedJsonDB(RunRecord, path, primary_key="id")


def start_run(
    ledger: IndexedJsonDB[RunRecord, uuid.UUID],
    command: str,
    model: str,
    optimizer: str,
    seed: int,
    run_dir: Path,
) -> RunRecord:
    record = RunRecord(
        id=uuid.uuid4(),
        command=command,
        model=model,
        optimizer=optimizer,
        seed=seed,
        run_dir=str(run_dir),
        created_at=datetime.now(timezone.utc).isoformat(),
    )
    ledger.add(record)
    return record


def finish_run(
    ledger: IndexedJsonDB[RunRecord, uuid.UUID],
    record: RunRecord,
    exit_code: int,
    *,
    bitwidths: Optional[str] = None,
    final_loss: Optional[float] = None,
    final_acc: Optional[float] = None,
    total_bops: Optional[int] = None,
) -> RunRecord:
    """Stamp the outcome of a run onto its record."""
    record.status = STATUS_FINISHED if exit_code == 0 else STATUS_FAILED
    record.exit_code = exit_code
    record.finished_at = datetime.now(timezone.utc).isoformat()
    if bitwidths is not None:
        record.bitwidths = bitwidths
    if final_loss is not None:
        record.final_loss = final_loss
    if final_acc is not None:
        record.final_acc = final_acc
    if total_bops is not None:
        record.total_bops = total_bops
    ledger.update(record)
    return record


def runs_for(ledger: IndexedJsonDB[RunRecord, uuid.UUID], command: str) -> list[RunRecord]:
    return ledger.find(command=command)
