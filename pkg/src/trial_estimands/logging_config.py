"""Logging setup: JSON or text records on stderr, tagged with the active run."""

import json
import logging
import os
import sys
import uuid
from collections.abc import Iterator
from contextlib import contextmanager
from contextvars import ContextVar
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, MutableMapping

import numpy as np

run_id_var: ContextVar[str | None] = ContextVar("run_id", default=None)
command_var: ContextVar[str | None] = ContextVar("command", default=None)

TEXT_FORMAT = "%(asctime)s %(levelname)-7s [%(run_id)s] %(name)s: %(message)s"


def _json_default(value: Any) -> Any:
    # Audit fields routinely carry numpy scalars straight out of the estimators
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    return repr(value)


class StructuredFormatter(logging.Formatter):
    """One JSON object per record."""

    def format(self, record: logging.LogRecord) -> str:
        payload: dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        for key, var in (("run_id", run_id_var), ("command", command_var)):
            value = var.get()
            if value:
                payload[key] = value
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        payload.update(getattr(record, "extra_fields", {}))
        return json.dumps(payload, default=_json_default)


class StandardFormatter(logging.Formatter):
    """Human-readable records; the run id stands in brackets ('-' outside a run)."""

    def __init__(self) -> None:
        super().__init__(fmt=TEXT_FORMAT, datefmt="%H:%M:%S")

    def format(self, record: logging.LogRecord) -> str:
        record.run_id = run_id_var.get() or "-"
        return super().format(record)


def setup_logging(level: str | None = None, log_format: str | None = None) -> None:
    """Route all records to stderr, replacing any handlers already installed.

    Args:
        level: DEBUG, INFO, WARNING or ERROR; falls back to LOG_LEVEL, then WARNING.
            Unknown names mean WARNING.
        log_format: 'json' or 'text'; falls back to LOG_FORMAT, then 'text'.
    """
    name = (level or os.getenv("LOG_LEVEL") or "WARNING").upper()
    numeric = getattr(logging, name, None)
    if not isinstance(numeric, int):
        numeric = logging.WARNING

    use_json = (log_format or os.getenv("LOG_FORMAT") or "text").lower() == "json"
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(StructuredFormatter() if use_json else StandardFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(numeric)

    # pandas pulls in numexpr, which reports its thread count at INFO
    logging.getLogger("numexpr").setLevel(logging.WARNING)


if TYPE_CHECKING:
    _LoggerAdapterBase = logging.LoggerAdapter[logging.Logger]
else:
    # logging.LoggerAdapter is only subscriptable at runtime on Python >= 3.11
    _LoggerAdapterBase = logging.LoggerAdapter


class LoggerAdapter(_LoggerAdapterBase):
    """Merges fixed context fields with any per-call ``extra_fields``."""

    def process(
        self, msg: str, kwargs: MutableMapping[str, Any]
    ) -> tuple[str, MutableMapping[str, Any]]:
        extra = kwargs.setdefault("extra", {})
        extra["extra_fields"] = {**(self.extra or {}), **extra.get("extra_fields", {})}
        return msg, kwargs


def get_logger_with_context(name: str, **context: Any) -> LoggerAdapter:
    """Logger whose records all carry ``context`` (e.g. ``replication=7``)."""
    return LoggerAdapter(logging.getLogger(name), context)


@contextmanager
def run_context(command: str, run_id: str | None = None) -> Iterator[str]:
    """Tag every record emitted inside the block with a run id and command name.

    Yields:
        The run id in effect
    """
    run_token = run_id_var.set(run_id or uuid.uuid4().hex[:12])
    command_token = command_var.set(command)
    try:
        yield run_id_var.get() or ""
    finally:
        command_var.reset(command_token)
        run_id_var.reset(run_token)
