"""Logging setup: readable stderr output plus a JSON-lines metrics file."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

PACKAGE_LOGGER = "src"
_HANDLER_TAG = "_saqlab_handler"


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (tuple, set)):
        return list(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


class JsonLinesFormatter(logging.Formatter):
    """One JSON object per record: ``event`` first, then the caller's fields in order."""

    def format(self, record: logging.LogRecord) -> str:
        payload: dict[str, Any] = {"event": getattr(record, "event", record.getMessage())}
        payload.update(getattr(record, "fields", {}))
        return json.dumps(payload, default=_plain)


class _EventsOnly(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        return hasattr(record, "event")


def log_event(logger: logging.Logger, event: str, **fields: Any) -> None:
    """Emit a structured record; the stderr handler shows it as ``event k=v ...``."""
    if not logger.isEnabledFor(logging.INFO):
        return
    text = " ".join(f"{k}={v}" for k, v in fields.items())
    logger.info("%s %s", event, text, extra={"event": event, "fields": fields})


def configure_logging(
    level: Union[int, str] = logging.INFO,
    jsonl_path: Optional[Union[str, Path]] = None,
) -> logging.Logger:
    """Attach handlers to the package logger, replacing ones from an earlier call."""
    logger = logging.getLogger(PACKAGE_LOGGER)
    close_logging()
    numeric = logging.getLevelName(level.upper()) if isinstance(level, str) else level
    if not isinstance(numeric, int):
        raise ValueError(f"unknown log level {level!r}")
    # the metrics file always receives INFO events
    logger.setLevel(min(numeric, logging.INFO) if jsonl_path is not None else numeric)
    logger.propagate = False

    stream = logging.StreamHandler(sys.stderr)
    stream.setLevel(numeric)
    stream.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    setattr(stream, _HANDLER_TAG, True)
    logger.addHandler(stream)

    if jsonl_path is not None:
        path = Path(jsonl_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(path, mode="a", encoding="utf-8")
        file_handler.setFormatter(JsonLinesFormatter())
        file_handler.addFilter(_EventsOnly())
        setattr(file_handler, _HANDLER_TAG, True)
        logger.addHandler(file_handler)
    return logger


def close_logging() -> None:
    """Detach and close every handler ``configure_logging`` attached."""
    logger = logging.getLogger(PACKAGE_LOGGER)
    for handler in list(logger.handlers):
        if getattr(handler, _HANDLER_TAG, False):
            logger.removeHandler(handler)
            handler.close()
