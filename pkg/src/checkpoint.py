"""Versioned JSON checkpoints with bit-exact array encoding."""

from __future__ import annotations

import base64
import json
import logging
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np

from src.errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "saqlab-checkpoint"
CHECKPOINT_VERSION = 1
_ARRAY_KEYS = {"dtype", "shape", "data"}


def encode_array(array: np.ndarray) -> dict[str, Any]:
    """``{"dtype", "shape", "data"}`` with ``data`` the base64 of little-endian bytes."""
    little = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))
    return {
        "dtype": little.dtype.str,
        "shape": list(little.shape),
        "data": base64.b64encode(little.tobytes()).decode("ascii"),
    }


def decode_array(obj: Mapping[str, Any]) -> np.ndarray:
    try:
        dtype = np.dtype(obj["dtype"])
        raw = base64.b64decode(obj["data"], validate=True)
        array = np.frombuffer(raw, dtype=dtype).reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed array entry: {exc}") from exc
    return array.astype(dtype.newbyteorder("="), copy=True)


def _encode(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return encode_array(value)
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Mapping):
        return {str(k): _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, float) and not np.isfinite(value):
        raise CheckpointError(f"cannot store non-finite value {value}")
    return value


def _decode(value: Any) -> Any:
    if isinstance(value, dict):
        if set(value) == _ARRAY_KEYS and isinstance(value["data"], str):
            return decode_array(value)
        return {k: _decode(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode(v) for v in value]
    return value


def dumps(payload: Mapping[str, Any]) -> str:
    body = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **_encode(payload)}
    return json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def save_checkpoint(path: Union[str, Path], payload: Mapping[str, Any]) -> Path:
    """Write ``payload`` (nested dicts, lists, scalars and arrays) to ``path``."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    text = dumps(payload)
    tmp = target.with_suffix(target.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(target)
    logger.info("checkpoint written to %s", target)
    return target


def load_checkpoint(path: Union[str, Path]) -> dict[str, Any]:
    source = Path(path)
    try:
        raw = json.loads(source.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint at {source}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{source} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{source} is not a {CHECKPOINT_FORMAT} file")
    if raw.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {raw.get('version')!r}")
    payload = {k: v for k, v in raw.items() if k not in ("format", "version")}
    decoded: dict[str, Any] = _decode(payload)
    return decoded


def section(payload: Mapping[str, Any], key: str, default: Optional[Any] = None) -> Any:
    """A top-level entry, or ``CheckpointError`` when it is required and absent."""
    if key in payload:
        return payload[key]
    if default is not None:
        return default
    raise CheckpointError(f"checkpoint has no {key!r} section")
