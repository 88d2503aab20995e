"""Tests for the logging setup and the JSON-lines metrics file."""

import json
import logging
from pathlib import Path
from typing import Generator

import numpy as np
import pytest

from src.logs import PACKAGE_LOGGER, JsonLinesFormatter, close_logging, configure_logging, log_event


@pytest.fixture(autouse=True)
def detach() -> Generator[None, None, None]:
    yield
    close_logging()


def read_lines(path: Path) -> list[dict[str, object]]:
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_events_reach_the_metrics_file(tmp_path: Path) -> None:
    path = tmp_path / "logs" / "metrics.jsonl"
    configure_logging("INFO", path)
    logger = logging.getLogger("src.training")
    log_event(logger, "epoch", epoch=np.int64(3), loss=np.float64(0.25), bits=(2, 4))
    logger.info("plain message")
    close_logging()
    assert read_lines(path) == [{"event": "epoch", "epoch": 3, "loss": 0.25, "bits": [2, 4]}]


def test_field_order_is_kept(tmp_path: Path) -> None:
    path = tmp_path / "metrics.jsonl"
    configure_logging(logging.INFO, path)
    log_event(logging.getLogger("src.cli"), "run_config", seed=1, model="mlp", alpha=0.5)
    close_logging()
    assert list(read_lines(path)[0]) == ["event", "seed", "model", "alpha"]


def test_quiet_console_still_records_events(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    path = tmp_path / "metrics.jsonl"
    configure_logging("WARNING", path)
    log_event(logging.getLogger("src.optim"), "step", loss=1.0)
    close_logging()
    assert read_lines(path) == [{"event": "step", "loss": 1.0}]
    assert "step" not in capsys.readouterr().err


def test_reconfiguring_replaces_handlers(tmp_path: Path) -> None:
    configure_logging("INFO", tmp_path / "a.jsonl")
    logger = configure_logging("DEBUG", tmp_path / "b.jsonl")
    assert len(logger.handlers) == 2
    assert logger.name == PACKAGE_LOGGER
    assert not logger.propagate
    close_logging()
    assert logger.handlers == []


def test_unknown_level() -> None:
    with pytest.raises(ValueError):
        configure_logging("LOUD")


def test_formatter_without_fields() -> None:
    record = logging.LogRecord("src", logging.INFO, __file__, 1, "hello %s", ("there",), None)
    assert json.loads(JsonLinesFormatter().format(record)) == {"event": "hello there"}
