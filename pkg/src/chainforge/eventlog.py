"""The two log streams: structured engine log and raw command-output log.

The engine log is JSON-lines, one object per event, flushed before the
next step begins. The output log is binary-safe: raw command output is
appended under a header line per step. Values of parameters named
`password` are redacted in the engine log; they are still typed normally
on the wire.
"""

from __future__ import annotations

import json
import os
import threading
from datetime import datetime, timezone
from pathlib import Path

from .errors import LogSinkError

REDACTED = "***"


def _redact(value):
    if isinstance(value, dict):
        return {k: (REDACTED if k == "password" else _redact(v))
                for k, v in value.items()}
    if isinstance(value, list):
        return [_redact(v) for v in value]
    return value


class EngineLog:
    """JSON-lines engine log; one writer lock shared by workers."""

    def __init__(self, path: str | os.PathLike, utc: bool = False):
        self.path = Path(path)
        self.utc = utc
        self._lock = threading.Lock()
        try:
            self._fh = open(self.path, "w", encoding="utf-8")
        except OSError as exc:
            raise LogSinkError(f"cannot open engine log {path}: {exc}") from exc

    def _timestamp(self) -> str:
        if self.utc:
            now = datetime.now(timezone.utc).replace(tzinfo=None)
        else:
            now = datetime.now()
        return now.strftime("%Y-%m-%dT%H:%M:%S.%f")

    def _emit(self, record: dict) -> None:
        with self._lock:
            record = {"event": record.pop("event"),
                      "start-datetime": self._timestamp(), **record}
            try:
                self._fh.write(json.dumps(record) + "\n")
                self._fh.flush()
            except OSError as exc:
                raise LogSinkError(f"engine log write failed: {exc}") from exc

    def playbook_start(self, playbook: str) -> None:
        self._emit({"event": "playbook_start", "playbook": playbook})

    def playbook_end(self, status: str, steps: int) -> None:
        self._emit({"event": "playbook_end", "status": status, "steps": steps})

    def command_start(self, step_index: int, kind: str, cmd: str | None,
                      parameters: dict) -> None:
        self._emit({"event": "command_start", "type": kind, "cmd": cmd,
                    "parameters": _redact(parameters), "step_index": step_index})

    def command_end(self, step_index: int, kind: str, cmd: str | None,
                    returncode: int, duration: float, parameters: dict) -> None:
        self._emit({"event": "command_end", "type": kind, "cmd": cmd,
                    "parameters": _redact(parameters), "step_index": step_index,
                    "returncode": returncode, "duration": duration})

    def command_skipped(self, step_index: int, kind: str, condition: str,
                        parameters: dict) -> None:
        self._emit({"event": "command_skipped", "type": kind,
                    "condition": condition, "parameters": _redact(parameters),
                    "step_index": step_index})

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()


class OutputLog:
    """Binary-safe command-output log.

    Each record is a header line `=== step <i> <type> <timestamp> ===`
    followed by the raw output bytes, unmodified. When a step carries
    `save:`, the bytes are additionally written verbatim to that path.
    """

    def __init__(self, path: str | os.PathLike, utc: bool = False):
        self.path = Path(path)
        self.utc = utc
        self._lock = threading.Lock()
        try:
            self._fh = open(self.path, "wb")
        except OSError as exc:
            raise LogSinkError(f"cannot open output log {path}: {exc}") from exc

    def record(self, step_index: int, kind: str, data: bytes,
               save: str | None = None) -> None:
        if self.utc:
            ts = datetime.now(timezone.utc).replace(tzinfo=None)
        else:
            ts = datetime.now()
        header = f"=== step {step_index} {kind} {ts.strftime('%Y-%m-%dT%H:%M:%S.%f')} ===\n"
        with self._lock:
            try:
                self._fh.write(header.encode("utf-8"))
                self._fh.write(data)
                self._fh.flush()
            except OSError as exc:
                raise LogSinkError(f"output log write failed: {exc}") from exc
        if save:
            try:
                save_path = Path(save)
                if save_path.parent and not save_path.parent.exists():
                    save_path.parent.mkdir(parents=True, exist_ok=True)
                save_path.write_bytes(data)
            except OSError as exc:
                raise LogSinkError(f"save to {save} failed: {exc}") from exc

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()
